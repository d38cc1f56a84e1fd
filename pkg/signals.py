"""Uniform-grid sampled signals, input generators and fading sup-norms."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.ndimage import gaussian_filter1d

from comparison import ExponentialKernel, MemoryKernel, TabulatedKernel
from errors import DomainError, ShapeError

logger = logging.getLogger(__name__)


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# ==========================================
# GRID AND SIGNAL
# ==========================================

class TimeGrid(_Frozen):
    t0: float = 0.0
    """Time of the first sample."""

    dt: float = Field(gt=0)
    """Sample spacing."""

    n: int = Field(ge=1)
    """Number of samples; a single sample is a zero-length horizon."""

    @classmethod
    def from_horizon(cls, horizon: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        if horizon < 0:
            raise DomainError("horizon must be nonnegative")
        return cls(t0=t0, dt=dt, n=int(round(horizon / dt)) + 1)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n)

    @property
    def horizon(self) -> float:
        return self.dt * (self.n - 1)

    @property
    def end(self) -> float:
        return self.t0 + self.horizon

    def index_of(self, t: float) -> int:
        """Index of the last sample at or before time t (clamped to the grid)."""
        k = int(math.floor((t - self.t0) / self.dt + 1e-9))
        return min(max(k, 0), self.n - 1)


@dataclass(frozen=True)
class SampledSignal:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] != self.grid.n or values.shape[1] < 1:
            raise ShapeError(
                f"values of shape {values.shape} do not fit a grid of {self.grid.n} samples"
            )
        if not np.all(np.isfinite(values)):
            raise DomainError("signal values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def norms(self) -> np.ndarray:
        """Euclidean norm of every sample."""
        return np.linalg.norm(self.values, axis=1)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=[f"v{i}" for i in range(self.dim)])
        frame.insert(0, "t", self.grid.times)
        return frame

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path, dt: Optional[float] = None) -> "SampledSignal":
        frame = pd.read_csv(Path(path), float_precision="round_trip")
        if list(frame.columns[:1]) != ["t"] or frame.shape[1] < 2:
            raise ShapeError(f"{path}: expected header t,v0,v1,...")
        t = frame["t"].to_numpy()
        if dt is None:
            if t.size < 2:
                raise ShapeError(f"{path}: a single-row signal needs an explicit dt")
            dt = (t[-1] - t[0]) / (t.size - 1)
        grid = TimeGrid(t0=float(t[0]), dt=float(dt), n=int(t.size))
        return cls(grid=grid, values=frame.drop(columns="t").to_numpy())


def signal_diff(a: SampledSignal, b: SampledSignal) -> SampledSignal:
    if a.grid != b.grid:
        raise ShapeError(f"grid mismatch: {a.grid} vs {b.grid}")
    if a.dim != b.dim:
        raise ShapeError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return SampledSignal(grid=a.grid, values=a.values - b.values)


# ==========================================
# GENERATORS
# ==========================================

class ConstantSpec(_Frozen):
    kind: Literal["constant"] = "constant"
    level: float = 0.0
    dim: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)

    @property
    def bound(self) -> float:
        return abs(self.level) * math.sqrt(self.dim)


class SinusoidSpec(_Frozen):
    kind: Literal["sinusoid"] = "sinusoid"

    amplitude: float = Field(gt=0)
    omega: float
    """Angular frequency in rad/time."""

    phase: float = 0.0
    seed: int = Field(default=0, ge=0)

    @property
    def bound(self) -> float:
        return self.amplitude


class PiecewiseConstantSpec(_Frozen):
    kind: Literal["piecewise_constant"] = "piecewise_constant"

    levels: int = Field(ge=1)
    """Number of equal-length segments."""

    amplitude: float = Field(gt=0)
    """Bound M_u on the Euclidean norm of every value."""

    dim: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)

    @property
    def bound(self) -> float:
        return self.amplitude


class SmoothedNoiseSpec(_Frozen):
    kind: Literal["smoothed_noise"] = "smoothed_noise"

    amplitude: float = Field(gt=0)
    """Bound M_u; the noise is scaled to standard deviation amplitude/2 then clipped."""

    correlation_time: float = Field(gt=0)
    """Width of the Gaussian smoothing window, in time units."""

    dim: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)

    @property
    def bound(self) -> float:
        return self.amplitude


class ExponentialSpec(_Frozen):
    kind: Literal["exponential"] = "exponential"
    amplitude: float = Field(gt=0)
    rate: float = Field(ge=0)
    seed: int = Field(default=0, ge=0)

    @property
    def bound(self) -> float:
        return self.amplitude


class WindowSpec(_Frozen):
    kind: Literal["window"] = "window"

    amplitude: float = Field(gt=0)
    start: float
    stop: float
    """Inclusive end of the window; the value is zero outside [start, stop]."""

    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_window(self) -> "WindowSpec":
        if self.stop < self.start:
            raise ValueError("window stop must not precede start")
        return self

    @property
    def bound(self) -> float:
        return self.amplitude


SignalGeneratorSpec = Annotated[
    Union[
        ConstantSpec,
        SinusoidSpec,
        PiecewiseConstantSpec,
        SmoothedNoiseSpec,
        ExponentialSpec,
        WindowSpec,
    ],
    Field(discriminator="kind"),
]


def _clip_norm(values: np.ndarray, bound: float) -> np.ndarray:
    norms = np.linalg.norm(values, axis=1, keepdims=True)
    scale = np.where(norms > bound, bound / np.maximum(norms, 1e-300), 1.0)
    return values * scale


def _constant(spec: ConstantSpec, grid: TimeGrid, rng) -> np.ndarray:
    return np.full((grid.n, spec.dim), spec.level)


def _sinusoid(spec: SinusoidSpec, grid: TimeGrid, rng) -> np.ndarray:
    return spec.amplitude * np.sin(spec.omega * grid.times + spec.phase)[:, None]


def _piecewise_constant(spec: PiecewiseConstantSpec, grid: TimeGrid, rng) -> np.ndarray:
    levels = rng.uniform(-spec.amplitude, spec.amplitude, size=(spec.levels, spec.dim))
    levels = _clip_norm(levels, spec.amplitude)
    segment = np.minimum(np.arange(grid.n) * spec.levels // grid.n, spec.levels - 1)
    return levels[segment]


def _smoothed_noise(spec: SmoothedNoiseSpec, grid: TimeGrid, rng) -> np.ndarray:
    white = rng.standard_normal((grid.n, spec.dim))
    smooth = gaussian_filter1d(white, sigma=spec.correlation_time / grid.dt, axis=0, mode="reflect")
    std = smooth.std()
    if std > 0:
        smooth = smooth * (spec.amplitude / 2.0) / std
    return _clip_norm(smooth, spec.amplitude)


def _exponential(spec: ExponentialSpec, grid: TimeGrid, rng) -> np.ndarray:
    return spec.amplitude * np.exp(-spec.rate * (grid.times - grid.t0))[:, None]


def _window(spec: WindowSpec, grid: TimeGrid, rng) -> np.ndarray:
    t = grid.times
    inside = (t >= spec.start - 1e-12) & (t <= spec.stop + 1e-12)
    return np.where(inside, spec.amplitude, 0.0)[:, None]


_GENERATORS = {
    "constant": _constant,
    "sinusoid": _sinusoid,
    "piecewise_constant": _piecewise_constant,
    "smoothed_noise": _smoothed_noise,
    "exponential": _exponential,
    "window": _window,
}


def generate_signal(spec: SignalGeneratorSpec, grid: TimeGrid) -> SampledSignal:
    """Sample a generator on the grid; the same seed always gives the same signal."""
    rng = np.random.default_rng(spec.seed)
    values = _GENERATORS[spec.kind](spec, grid, rng)
    return SampledSignal(grid=grid, values=values)


def adversarial_drive(grid: TimeGrid, rate: float, peak: float) -> SampledSignal:
    """peak * exp(-rate (t - t0)).

    Under an exponential kernel of the same rate every past sample weighs
    the same, so the whole history is binding at once.
    """
    if rate < 0 or peak <= 0:
        raise DomainError("adversarial drive needs rate >= 0 and peak > 0")
    return generate_signal(ExponentialSpec(amplitude=peak, rate=rate), grid)


# ==========================================
# FADING NORMS
# ==========================================

def _check_index(delta: SampledSignal, t_index: int) -> None:
    if not 0 <= t_index < delta.grid.n:
        raise DomainError(f"t_index {t_index} outside grid of {delta.grid.n} samples")


def fading_sup_norm(delta: SampledSignal, kernel: MemoryKernel, t_index: int) -> float:
    """max_{k <= t_index} w(t - t_k) * ||delta(t_k)||."""
    _check_index(delta, t_index)
    lags = delta.grid.dt * np.arange(t_index, -1, -1)
    weighted = np.asarray(kernel.weight(lags)) * delta.norms()[: t_index + 1]
    return float(weighted.max())


def sup_norm_prefix(delta: SampledSignal, t_index: int) -> float:
    _check_index(delta, t_index)
    return float(delta.norms()[: t_index + 1].max())


def _is_unit(kernel: MemoryKernel) -> bool:
    return isinstance(kernel, TabulatedKernel) and all(w == 1.0 for w in kernel.weights)


def fading_sup_profile(norms: np.ndarray, kernel: MemoryKernel, dt: float) -> np.ndarray:
    """Fading sup-norm at every grid index for rows of difference norms.

    `norms` has shape (N,) or (B, N); the result has the same shape.
    """
    d = np.asarray(norms, dtype=float)
    squeeze = d.ndim == 1
    d = np.atleast_2d(d)
    n = d.shape[1]
    out = np.empty_like(d)

    if isinstance(kernel, ExponentialKernel):
        decay = math.exp(-kernel.rate * dt)
        out[:, 0] = d[:, 0]
        for k in range(1, n):
            np.maximum(d[:, k], decay * out[:, k - 1], out=out[:, k])
    elif _is_unit(kernel):
        np.maximum.accumulate(d, axis=1, out=out)
    else:
        w_lag = np.asarray(kernel.weight(dt * np.arange(n)))
        for k in range(n):
            out[:, k] = (d[:, : k + 1] * w_lag[k::-1]).max(axis=1)
    return out[0] if squeeze else out
