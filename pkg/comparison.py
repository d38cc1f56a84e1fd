"""Comparison functions: memory kernels, class-K-infinity gains and class-KL terms.

Every family is a frozen pydantic model tagged by a ``family`` literal, so
a kernel, gain or KL function round-trips through JSON as a flat object
such as ``{"family": "exponential", "rate": 0.5}``.

All ``value``/``weight`` methods accept scalars or numpy arrays and are
pure, so the objects can be shared freely between worker threads.
"""
from __future__ import annotations

import logging
import math
from typing import Annotated, Literal, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import brentq

from errors import DomainError, NumericError

logger = logging.getLogger(__name__)

# Default tail tolerance of tabulated kernels (largest admissible final weight).
TAIL_TOLERANCE = 0.1
# Number of points of the logarithmic r-grid used by kernel_from_gain.
R_GRID_POINTS = 64
# Smallest r of that grid, relative to 2 * input_bound.
R_GRID_SPAN = 1e-4


def _out(x):
    arr = np.asarray(x, dtype=float)
    return float(arr) if arr.ndim == 0 else arr


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# ==========================================
# MEMORY KERNELS
# ==========================================

class ExponentialKernel(_Frozen):
    family: Literal["exponential"] = "exponential"

    rate: float = Field(gt=0)
    """Decay rate of w(lag) = exp(-rate * lag), in 1/time."""

    def weight(self, lag):
        return _out(np.exp(-self.rate * np.asarray(lag, dtype=float)))


class PowerLawKernel(_Frozen):
    family: Literal["power_law"] = "power_law"

    exponent: float = Field(gt=0)
    """Tail exponent p of w(lag) = (1 + lag/scale)^-p."""

    scale: float = Field(gt=0)
    """Time scale before the power-law tail sets in."""

    def weight(self, lag):
        return _out((1.0 + np.asarray(lag, dtype=float) / self.scale) ** (-self.exponent))


class TabulatedKernel(_Frozen):
    family: Literal["tabulated"] = "tabulated"

    lags: Tuple[float, ...]
    """Strictly increasing lag samples, starting at 0."""

    weights: Tuple[float, ...]
    """Nonincreasing weights in [0, 1] at the lag samples."""

    tail_tolerance: float = Field(default=TAIL_TOLERANCE, ge=0, le=1)
    """Largest admissible final weight; stands in for the vanishing tail."""

    @model_validator(mode="after")
    def _check_samples(self) -> "TabulatedKernel":
        lags = np.asarray(self.lags, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if lags.size == 0 or lags.size != w.size:
            raise ValueError("lags and weights must be nonempty and of equal length")
        if lags[0] != 0.0 or np.any(np.diff(lags) <= 0):
            raise ValueError("lags must start at 0 and increase strictly")
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("weights must lie in [0, 1]")
        if np.any(np.diff(w) > 0):
            raise ValueError("weights must be nonincreasing")
        if w[-1] > self.tail_tolerance:
            raise ValueError(
                f"final weight {w[-1]} exceeds tail tolerance {self.tail_tolerance}"
            )
        return self

    def weight(self, lag):
        # linear interpolation, final weight held beyond the last lag
        return _out(np.interp(np.asarray(lag, dtype=float), self.lags, self.weights))


MemoryKernel = Annotated[
    Union[ExponentialKernel, PowerLawKernel, TabulatedKernel],
    Field(discriminator="family"),
]


def kernel_eval(kernel: MemoryKernel, lag):
    """w(lag) for a scalar or an array of nonnegative lags."""
    lag_arr = np.asarray(lag, dtype=float)
    if np.any(lag_arr < 0) or np.any(~np.isfinite(lag_arr)):
        raise DomainError(f"kernel lag must be finite and nonnegative, got {lag}")
    return kernel.weight(lag_arr)


def unit_kernel(horizon: float) -> TabulatedKernel:
    """All-ones kernel over [0, horizon]: the fading norm becomes the sup norm."""
    if horizon <= 0:
        raise DomainError("unit kernel horizon must be positive")
    return TabulatedKernel(lags=(0.0, float(horizon)), weights=(1.0, 1.0), tail_tolerance=1.0)


def kernel_monotone_envelope(
    lags: Sequence[float],
    weights: Sequence[float],
    tail_tolerance: float = TAIL_TOLERANCE,
) -> TabulatedKernel:
    """Smallest nonincreasing tabulated kernel lying above the raw samples.

    The envelope is the reverse running maximum w~(x) = max_{y >= x} w(y).
    """
    lags_arr = np.asarray(lags, dtype=float)
    raw = np.asarray(weights, dtype=float)
    if raw.size == 0:
        raise DomainError("cannot build an envelope from an empty sample set")
    if raw.shape != lags_arr.shape:
        raise DomainError("lags and weights must have the same length")
    if np.any(raw < 0) or np.any(raw > 1):
        raise DomainError("raw weights must lie in [0, 1]")
    if raw[-1] > tail_tolerance:
        raise DomainError(f"final raw weight {raw[-1]} exceeds tail tolerance {tail_tolerance}")
    envelope = np.maximum.accumulate(raw[::-1])[::-1]
    try:
        return TabulatedKernel(
            lags=tuple(lags_arr.tolist()),
            weights=tuple(envelope.tolist()),
            tail_tolerance=tail_tolerance,
        )
    except ValueError as exc:
        raise DomainError(str(exc)) from exc


# ==========================================
# CLASS-K-INFINITY GAINS
# ==========================================

class LinearGain(_Frozen):
    family: Literal["linear"] = "linear"

    slope: float = Field(gt=0)
    """gamma(r) = slope * r."""

    def value(self, r):
        return _out(self.slope * np.asarray(r, dtype=float))

    def inverse(self, v):
        return _out(np.asarray(v, dtype=float) / self.slope)

    def scaled(self, c: float) -> "LinearGain":
        return LinearGain(slope=self.slope * c)

    def plus_linear(self, slope: float) -> "LinearGain":
        return LinearGain(slope=self.slope + slope)


class PolynomialGain(_Frozen):
    family: Literal["polynomial"] = "polynomial"

    coefficients: Tuple[float, ...] = Field(min_length=1)
    """c_1..c_k of gamma(r) = sum_k c_k r^k; the constant term is always zero."""

    @model_validator(mode="after")
    def _check_coefficients(self) -> "PolynomialGain":
        c = np.asarray(self.coefficients, dtype=float)
        if np.any(c < 0) or not np.any(c > 0):
            raise ValueError("coefficients must be nonnegative with at least one positive")
        return self

    def value(self, r):
        r_arr = np.asarray(r, dtype=float)
        return _out(np.polynomial.polynomial.polyval(r_arr, (0.0,) + tuple(self.coefficients)))

    def _invert_one(self, v: float) -> float:
        if v == 0.0:
            return 0.0
        nonzero = [(k + 1, c) for k, c in enumerate(self.coefficients) if c > 0]
        if len(nonzero) == 1:
            power, c = nonzero[0]
            return (v / c) ** (1.0 / power)
        hi = 1.0
        while self.value(hi) < v:
            hi *= 2.0
            if hi > 1e300:
                raise NumericError(f"cannot bracket inverse of polynomial gain at {v}")
        return brentq(lambda r: self.value(r) - v, 0.0, hi, xtol=1e-300, maxiter=500)

    def inverse(self, v):
        v_arr = np.asarray(v, dtype=float)
        flat = np.array([self._invert_one(float(x)) for x in v_arr.ravel()])
        return _out(flat.reshape(v_arr.shape))

    def scaled(self, c: float) -> "PolynomialGain":
        return PolynomialGain(coefficients=tuple(c * x for x in self.coefficients))

    def plus_linear(self, slope: float) -> "PolynomialGain":
        c = list(self.coefficients)
        c[0] += slope
        return PolynomialGain(coefficients=tuple(c))


class TabulatedGain(_Frozen):
    family: Literal["tabulated"] = "tabulated"

    args: Tuple[float, ...]
    """Strictly increasing arguments, starting at 0."""

    values: Tuple[float, ...]
    """Strictly increasing gain values, starting at 0."""

    @model_validator(mode="after")
    def _check_samples(self) -> "TabulatedGain":
        a = np.asarray(self.args, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if a.size < 2 or a.size != v.size:
            raise ValueError("need at least two (arg, value) samples of equal length")
        if a[0] != 0.0 or v[0] != 0.0:
            raise ValueError("tabulated gain must pass through the origin")
        if np.any(np.diff(a) <= 0) or np.any(np.diff(v) <= 0):
            raise ValueError("tabulated gain samples must increase strictly")
        return self

    def value(self, r):
        r_arr = np.asarray(r, dtype=float)
        if np.any(r_arr > self.args[-1]):
            raise DomainError(f"argument beyond tabulated range [0, {self.args[-1]}]")
        return _out(np.interp(r_arr, self.args, self.values))

    def inverse(self, v):
        v_arr = np.asarray(v, dtype=float)
        if np.any(v_arr > self.values[-1]):
            raise DomainError(f"value beyond tabulated range [0, {self.values[-1]}]")
        return _out(np.interp(v_arr, self.values, self.args))

    def scaled(self, c: float) -> "TabulatedGain":
        return TabulatedGain(args=self.args, values=tuple(c * x for x in self.values))

    def plus_linear(self, slope: float) -> "TabulatedGain":
        return TabulatedGain(
            args=self.args,
            values=tuple(v + slope * a for a, v in zip(self.args, self.values)),
        )


GainFunction = Annotated[
    Union[LinearGain, PolynomialGain, TabulatedGain],
    Field(discriminator="family"),
]


def gain_eval(gain: GainFunction, r):
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise DomainError("gain argument must be nonnegative")
    return gain.value(r_arr)


def gain_inverse(gain: GainFunction, value):
    """gamma^-1(value) for the invertible gain families."""
    v_arr = np.asarray(value, dtype=float)
    if np.any(v_arr < 0) or np.any(~np.isfinite(v_arr)):
        raise DomainError(f"gain inverse needs a finite nonnegative value, got {value}")
    return gain.inverse(v_arr)


# ==========================================
# CLASS-KL FUNCTIONS
# ==========================================

class ExpDecayKL(_Frozen):
    family: Literal["exp_decay"] = "exp_decay"

    gain: GainFunction
    """Amplitude part, evaluated on the initial mismatch."""

    rate: float = Field(gt=0)
    """Exponential decay rate in time."""

    def value(self, r, t):
        t_arr = np.asarray(t, dtype=float)
        return _out(np.asarray(self.gain.value(r)) * np.exp(-self.rate * t_arr))

    def scaled(self, c: float) -> "ExpDecayKL":
        return ExpDecayKL(gain=self.gain.scaled(c), rate=self.rate)


class ProductKL(_Frozen):
    family: Literal["product"] = "product"

    k_part: GainFunction
    kernel: MemoryKernel

    def value(self, r, t):
        return _out(np.asarray(self.k_part.value(r)) * np.asarray(self.kernel.weight(t)))

    def scaled(self, c: float) -> "ProductKL":
        return ProductKL(k_part=self.k_part.scaled(c), kernel=self.kernel)


KLFunction = Annotated[Union[ExpDecayKL, ProductKL], Field(discriminator="family")]


def kl_eval(beta: KLFunction, r, t):
    r_arr = np.asarray(r, dtype=float)
    t_arr = np.asarray(t, dtype=float)
    if np.any(r_arr < 0) or np.any(t_arr < 0):
        raise DomainError("KL arguments must be nonnegative")
    return beta.value(r_arr, t_arr)


# ==========================================
# KERNEL CONSTRUCTION FROM A DISSIPATION GAIN
# ==========================================

def kernel_from_gain(
    mu: GainFunction,
    lam: float,
    input_bound: float,
    lag_grid: Sequence[float],
    r_points: int = R_GRID_POINTS,
) -> TabulatedKernel:
    """w(t) = sup_{r in (0, 2 M_u]} mu^-1(exp(-lam t / 2) mu(r)) / r on a lag grid.

    The supremum is taken over a logarithmic r-grid; the result is passed
    through the monotone envelope so it is a valid tabulated kernel.
    """
    if lam <= 0:
        raise DomainError("decay rate lambda must be positive")
    if input_bound <= 0:
        raise DomainError("input bound must be positive")
    if r_points < R_GRID_POINTS:
        raise DomainError(f"r-grid needs at least {R_GRID_POINTS} points")
    lags = np.asarray(lag_grid, dtype=float)

    r = np.geomspace(2.0 * input_bound * R_GRID_SPAN, 2.0 * input_bound, r_points)
    try:
        mu_r = np.asarray(gain_eval(mu, r))
    except DomainError as exc:
        raise NumericError(f"mu cannot be evaluated on (0, {2.0 * input_bound}]: {exc}") from exc

    weights = np.empty_like(lags)
    for i, lag in enumerate(lags):
        shrink = math.exp(-lam * lag / 2.0)
        try:
            ratios = np.asarray(gain_inverse(mu, shrink * mu_r)) / r
        except (DomainError, NumericError) as exc:
            raise NumericError(f"mu is not invertible at lag {lag}: {exc}") from exc
        weights[i] = ratios.max()
    weights = np.clip(weights, 0.0, 1.0)
    logger.debug("[kernel] built %d-lag kernel from %s gain", lags.size, mu.family)
    # grid truncation, not the construction, fixes the final weight
    return kernel_monotone_envelope(lags, weights, tail_tolerance=1.0)
