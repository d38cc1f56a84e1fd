"""Cascade approximators: a diagonal stable filter bank followed by a
polynomial readout fitted by ridge regression.

Each filter obeys z' = -a z + u per input channel and is advanced with the
exact exponential update for an input that is linear inside each grid step,
so bank states carry no integration error beyond the input interpolation.
"""
from __future__ import annotations

import logging
import math
from itertools import combinations_with_replacement
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import qr, solve_triangular, svd
from scipy.signal import lfilter

from dynamics import SystemModel, integrate_batch
from errors import DomainError, ShapeError, SingularityError
from fm_analysis import EnsembleSpec, ScreenResult, draw_pairs, fm_screen
from signals import SampledSignal

logger = logging.getLogger(__name__)

VALIDATION_FRACTION = 0.2
# Relative size of the smallest R diagonal before an unregularized fit is called singular.
RANK_TOL = 1e-12
# Allowed relative increase of validation error when adding filters.
CAPACITY_BAND = 0.05
# Candidate ridge parameters when the readout regularization is chosen on held-out signals.
RIDGE_GRID = tuple(np.geomspace(1e-8, 10.0, 10).tolist())


# ==========================================
# FILTER BANK
# ==========================================

class FilterBank(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    rates: Tuple[float, ...]
    """Strictly increasing positive decay rates a_i (1/time)."""

    input_dim: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_rates(self) -> "FilterBank":
        r = np.asarray(self.rates, dtype=float)
        if r.size == 0 or np.any(r <= 0) or np.any(np.diff(r) <= 0):
            raise ValueError("rates must be positive and strictly increasing")
        return self

    @property
    def state_dim(self) -> int:
        return len(self.rates) * self.input_dim

    def state_rates(self) -> np.ndarray:
        """Rate of every bank state in rate-major order."""
        return np.repeat(np.asarray(self.rates), self.input_dim)


def build_filterbank(n_filters: int, rate_min: float, rate_max: float, input_dim: int = 1) -> FilterBank:
    if n_filters < 1:
        raise DomainError("need at least one filter")
    if not 0 < rate_min < rate_max:
        raise DomainError(f"need 0 < rate_min < rate_max, got [{rate_min}, {rate_max}]")
    rates = np.geomspace(rate_min, rate_max, n_filters) if n_filters > 1 else np.array([rate_min])
    return FilterBank(rates=tuple(rates.tolist()), input_dim=input_dim)


def _linear_input_weights(a: float, h: float) -> Tuple[float, float, float]:
    """(decay, phi1, phi2) with z+ = decay z + (phi1 - phi2) u_k + phi2 u_{k+1}."""
    x = a * h
    decay = math.exp(-x)
    phi1 = -math.expm1(-x) / a
    if x < 1e-3:
        # 1 - e^-x (1 + x) by series, the closed form cancels badly here
        tail = x * x / 2.0 - x ** 3 / 3.0 + x ** 4 / 8.0
    else:
        tail = 1.0 - decay * (1.0 + x)
    phi2 = phi1 - tail / (a * a * h)
    return decay, phi1, phi2


def _bank_states(bank: FilterBank, u: np.ndarray, dt: float, z0: Optional[np.ndarray] = None) -> np.ndarray:
    """u of shape (B, N, m) -> bank states (B, N, n_rates * m), rate-major."""
    batch, n, m = u.shape
    if m != bank.input_dim:
        raise ShapeError(f"bank expects {bank.input_dim} input channels, got {m}")
    out = np.empty((batch, n, bank.state_dim))
    z_init = np.zeros((batch, bank.state_dim)) if z0 is None else np.broadcast_to(z0, (batch, bank.state_dim))
    for i, a in enumerate(bank.rates):
        decay, phi1, phi2 = _linear_input_weights(a, dt)
        cols = slice(i * m, (i + 1) * m)
        # zi chosen so the first output equals z0
        zi = (z_init[:, cols] - phi2 * u[:, 0, :])[:, None, :]
        out[:, :, cols], _ = lfilter([phi2, phi1 - phi2], [1.0, -decay], u, axis=1, zi=zi)
    return out


def run_bank(bank: FilterBank, u: SampledSignal, z0=None) -> SampledSignal:
    z0_arr = None if z0 is None else np.asarray(z0, dtype=float).reshape(1, -1)
    if z0_arr is not None and z0_arr.shape[1] != bank.state_dim:
        raise ShapeError(f"z0 must have {bank.state_dim} entries")
    states = _bank_states(bank, u.values[None], u.grid.dt, z0_arr)[0]
    return SampledSignal(grid=u.grid, values=states)


# ==========================================
# POLYNOMIAL READOUT
# ==========================================

def _monomials(n_inputs: int, degree: int) -> List[Tuple[int, ...]]:
    terms: List[Tuple[int, ...]] = []
    for d in range(degree + 1):
        terms.extend(combinations_with_replacement(range(n_inputs), d))
    return terms


class PolynomialReadout(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    degree: int = Field(ge=0)
    n_inputs: int = Field(ge=1)
    coefficients: List[List[float]]
    """One row per monomial (constant term first), one column per output."""

    @model_validator(mode="after")
    def _check_coefficients(self) -> "PolynomialReadout":
        c = np.asarray(self.coefficients, dtype=float)
        if c.ndim != 2 or c.shape[0] != len(_monomials(self.n_inputs, self.degree)):
            raise ValueError("coefficient count does not match the monomial count")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        return self

    def features(self, x: np.ndarray) -> np.ndarray:
        return polynomial_features(x, self.degree)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        phi = self.features(x.reshape(-1, x.shape[-1]))
        y = phi @ np.asarray(self.coefficients)
        return y.reshape(lead + (y.shape[-1],))


def polynomial_features(x: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree <= degree over the columns of x."""
    x = np.asarray(x, dtype=float)
    terms = _monomials(x.shape[1], degree)
    phi = np.empty((x.shape[0], len(terms)))
    for j, term in enumerate(terms):
        col = np.ones(x.shape[0])
        for idx in term:
            col = col * x[:, idx]
        phi[:, j] = col
    return phi


def fit_readout(features: np.ndarray, targets: np.ndarray, degree: int, ridge: float = 0.0) -> PolynomialReadout:
    """Ridge least squares through a QR factorization of the augmented system
    [phi; sqrt(ridge) I] c = [y; 0]."""
    if ridge < 0:
        raise DomainError("ridge parameter must be nonnegative")
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise ShapeError("features and targets need the same number of rows")
    phi = polynomial_features(x, degree)
    n_terms = phi.shape[1]
    if ridge > 0:
        phi = np.vstack([phi, math.sqrt(ridge) * np.eye(n_terms)])
        y = np.vstack([y, np.zeros((n_terms, y.shape[1]))])
    elif phi.shape[0] < n_terms:
        raise SingularityError(
            f"{phi.shape[0]} samples for {n_terms} monomials; use a positive ridge parameter"
        )
    q, r = qr(phi, mode="economic")
    diag = np.abs(np.diag(r))
    if ridge == 0 and diag.min() <= RANK_TOL * max(diag.max(), 1e-300):
        raise SingularityError("feature matrix is rank deficient; use a positive ridge parameter")
    coef = solve_triangular(r, q.T @ y)
    return PolynomialReadout(degree=degree, n_inputs=x.shape[1], coefficients=coef.tolist())


def ridge_path(
    features: np.ndarray,
    targets: np.ndarray,
    held_features: np.ndarray,
    held_targets: np.ndarray,
    degree: int,
    ridges: Sequence[float],
) -> np.ndarray:
    """Held-out NRMSE of the ridge readout for every ridge parameter.

    One thin SVD of the feature matrix serves the whole path.
    """
    lams = np.asarray(ridges, dtype=float)
    if lams.size == 0 or np.any(lams <= 0):
        raise DomainError("ridge grid needs positive values")
    y = np.asarray(targets, dtype=float).reshape(len(features), -1)
    y_held = np.asarray(held_targets, dtype=float).reshape(len(held_features), -1)
    u, s, vt = svd(polynomial_features(features, degree), full_matrices=False)
    uty = u.T @ y
    phi_held = polynomial_features(held_features, degree)
    scores = np.empty(lams.size)
    for i, lam in enumerate(lams):
        coef = vt.T @ ((s / (s * s + lam))[:, None] * uty)
        scores[i] = nrmse(phi_held @ coef, y_held)
    return scores


# ==========================================
# CASCADE
# ==========================================

class CascadeApproximator(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    bank: FilterBank
    readout: PolynomialReadout
    feedthrough: bool = False
    """Instantaneous input channels are appended to the readout arguments."""

    normalize: bool = True
    """Bank states enter the readout as a_i z_i (unit dc gain)."""

    target_label: str = ""
    x0: List[float] = []
    ridge: float = 0.0
    """Ridge parameter of the final fit, chosen from ridge_grid when one was given."""

    ridge_grid: Optional[List[float]] = None
    stride: int = 1
    train_nrmse: Optional[float] = None
    val_nrmse: Optional[float] = None
    screen: Optional[ScreenResult] = None
    ensemble: Optional[EnsembleSpec] = None

    def save(self, path) -> None:
        Path(path).write_text(self.model_dump_json(indent=2))

    @classmethod
    def load(cls, path) -> "CascadeApproximator":
        return cls.model_validate_json(Path(path).read_text())


def _readout_inputs(bank: FilterBank, states: np.ndarray, u: np.ndarray, normalize: bool, feedthrough: bool):
    z = states * bank.state_rates() if normalize else states
    return np.concatenate([z, u], axis=-1) if feedthrough else z


def approx_eval(cascade: CascadeApproximator, u: SampledSignal) -> SampledSignal:
    states = run_bank(cascade.bank, u).values
    x = _readout_inputs(cascade.bank, states, u.values, cascade.normalize, cascade.feedthrough)
    return SampledSignal(grid=u.grid, values=cascade.readout.predict(x))


def cascade_model(cascade: CascadeApproximator) -> SystemModel:
    """The cascade as an ordinary state-space model, starting from z = 0."""
    bank = cascade.bank
    rates = bank.state_rates()
    m = bank.input_dim

    def dynamics(t, z, u):
        return -rates * z + np.tile(u, len(bank.rates))

    def readout(z, u):
        return cascade.readout.predict(_readout_inputs(bank, z, u, cascade.normalize, cascade.feedthrough))

    return SystemModel(
        label=f"cascade[{cascade.target_label}]",
        state_dim=bank.state_dim,
        input_dim=m,
        output_dim=len(cascade.readout.coefficients[0]),
        dynamics=dynamics,
        readout=readout,
        pinned_initial=tuple((i, 0.0) for i in range(bank.state_dim)),
    )


def nrmse(prediction: np.ndarray, target: np.ndarray) -> float:
    """RMSE normalized by the RMS of the target."""
    err = math.sqrt(float(np.mean((prediction - target) ** 2)))
    scale = math.sqrt(float(np.mean(target ** 2)))
    if scale == 0:
        return 0.0 if err == 0 else math.inf
    return err / scale


def train_approximator(
    target: SystemModel,
    x0: Sequence[float],
    ens: EnsembleSpec,
    n_filters: int,
    degree: int,
    ridge: float = 1e-6,
    include_feedthrough: bool = False,
    rate_min: float = 0.1,
    rate_max: float = 10.0,
    normalize: bool = True,
    stride: int = 1,
    validation_fraction: float = VALIDATION_FRACTION,
    ridge_grid: Optional[Sequence[float]] = None,
) -> CascadeApproximator:
    """Fit a cascade to the target's responses from a fixed x0.

    The ensemble's pair_count is the number of input signals; the last
    validation_fraction of them (whole signals) is held out. With a
    ridge_grid, the same fraction of the training signals is set aside once
    more to pick the ridge parameter, and the readout is then refitted on
    all training signals.
    """
    if stride < 1:
        raise DomainError("stride must be >= 1")
    count = ens.pair_count
    n_val = max(1, int(round(validation_fraction * count)))
    if count - n_val < 1:
        raise DomainError("need at least two signals to hold out a validation split")
    n_train = count - n_val
    n_sel = max(1, int(round(validation_fraction * n_train)))
    if ridge_grid is not None and n_train - n_sel < 1:
        raise DomainError("too few training signals to choose the ridge parameter")

    # first input of every pair; the initial box is irrelevant here
    box_ens = ens.model_copy(update={"initial_box": [(v, v) for v in x0], "input_mode": "common"})
    screen = fm_screen(target, box_ens)
    if target.time_varying:
        logger.warning("[approx] %s is time-varying; cascade approximation is not guaranteed", target.label)
    elif not screen.passed:
        logger.warning("[approx] %s fails the fading-memory screen (sup-norm slope %s, fading slope %s); "
                       "cascade approximation is not guaranteed",
                       target.label, screen.increment_slope, screen.fading_slope)
    _, _, u, _, _ = draw_pairs(target, box_ens, 0, count)
    x0s = target.pin(np.tile(np.asarray(x0, dtype=float), (count, 1)))
    y = integrate_batch(target, x0s, u, ens.grid, ens.substeps).outputs

    bank = build_filterbank(n_filters, rate_min, rate_max, target.input_dim)
    z = _bank_states(bank, u, ens.grid.dt)
    x = _readout_inputs(bank, z, u, normalize, include_feedthrough)

    def rows(arr: np.ndarray) -> np.ndarray:
        return arr[:, ::stride].reshape(-1, arr.shape[-1])

    if ridge_grid is not None:
        n_fit = n_train - n_sel
        scores = ridge_path(rows(x[:n_fit]), rows(y[:n_fit]), rows(x[n_fit:n_train]), rows(y[n_fit:n_train]),
                            degree, ridge_grid)
        ridge = float(ridge_grid[int(np.argmin(scores))])
        logger.info("[approx] %s: %d filters chose ridge %.3g (held-out NRMSE %.4g)",
                    target.label, n_filters, ridge, float(scores.min()))

    x_train, y_train = rows(x[:n_train]), rows(y[:n_train])
    readout = fit_readout(x_train, y_train, degree, ridge)

    train_err = nrmse(readout.predict(x_train), y_train)
    val_err = nrmse(readout.predict(x[n_train:]), y[n_train:])
    logger.info("[approx] %s: %d filters, degree %d -> train NRMSE %.4g, validation NRMSE %.4g",
                target.label, n_filters, degree, train_err, val_err)
    return CascadeApproximator(
        bank=bank,
        readout=readout,
        feedthrough=include_feedthrough,
        normalize=normalize,
        target_label=target.label,
        x0=[float(v) for v in x0],
        ridge=ridge,
        ridge_grid=None if ridge_grid is None else [float(v) for v in ridge_grid],
        stride=stride,
        train_nrmse=train_err,
        val_nrmse=val_err,
        screen=screen,
        ensemble=ens,
    )


class CapacityRow(BaseModel):
    n_filters: int
    train_nrmse: float
    val_nrmse: float
    ridge: float


class CapacityReport(BaseModel):
    degree: int
    feedthrough: bool
    rows: List[CapacityRow]
    monotone: bool
    """Validation error never rises by more than the noise band as filters are added."""

    strict_improvement: bool
    """Largest bank beats the smallest bank."""


def capacity_study(
    target: SystemModel,
    x0: Sequence[float],
    ens: EnsembleSpec,
    n_filters_list: Sequence[int],
    degree: int,
    **train_kwargs,
) -> CapacityReport:
    rows = []
    for n in n_filters_list:
        cascade = train_approximator(target, x0, ens, n, degree, **train_kwargs)
        rows.append(CapacityRow(n_filters=n, train_nrmse=cascade.train_nrmse, val_nrmse=cascade.val_nrmse,
                                ridge=cascade.ridge))
    errs = [row.val_nrmse for row in rows]
    monotone = all(b <= a * (1.0 + CAPACITY_BAND) for a, b in zip(errs, errs[1:]))
    return CapacityReport(
        degree=degree,
        feedthrough=bool(train_kwargs.get("include_feedthrough", False)),
        rows=rows,
        monotone=monotone,
        strict_improvement=errs[-1] < errs[0],
    )
