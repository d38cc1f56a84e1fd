"""Fading-memory margins, ensemble falsification and certificate fitting.

A candidate certificate (beta, gamma, w) is checked pairwise: for two runs
a and b of the same model,

    sum form:  |dy(t)| <= beta(|dx(0)|, t) + gamma(|du|_w(t))
    max form:  |dy(t)| <= max(beta(|dx(0)|, t), gamma(|du|_w(t)))

where |du|_w(t) is the fading sup-norm of the input difference. The margin
is the right-hand side minus |dy(t)|; a pair violates the candidate when
its margin drops below -tolerance.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from comparison import (
    ExpDecayKL,
    ExponentialKernel,
    GainFunction,
    KLFunction,
    LinearGain,
    MemoryKernel,
    TabulatedGain,
    kernel_from_gain,
    unit_kernel,
)
from dynamics import SystemModel, Trajectory, integrate_batch
from errors import DomainError, NumericError, ShapeError
from local_models.memristor import MemristorParams
from signals import (
    SampledSignal,
    SignalGeneratorSpec,
    TimeGrid,
    adversarial_drive,
    fading_sup_profile,
    generate_signal,
)

logger = logging.getLogger(__name__)

MARGIN_TOL = 1e-7
CHUNK_PAIRS = 1024
# Relative headroom on the fitted decay amplitude.
DECAY_HEADROOM = 1e-3
# Adversarial probe horizon, in units of 1/rate.
ADVERSARIAL_SPAN = 10.0
# First trial rate, in units of 1/horizon.
RATE_START = 10.0
BISECTION_RATIO = 1.05
DEFAULT_GAMMA_SLOPES = tuple(np.geomspace(0.5, 2.0, 7).tolist())
# Pairs, slope ceiling and largest kernel rate of the quick screen run before approximation.
SCREEN_PAIRS = 16
SCREEN_SLOPE = 10.0
SCREEN_RATE = 0.1

CertificateForm = Literal["sum", "max"]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# ==========================================
# DATA MODELS
# ==========================================

class FmCertificateCandidate(_Frozen):
    beta: KLFunction
    """Transient term, evaluated on the initial-state mismatch."""

    gamma: GainFunction
    """Input gain, evaluated on the fading sup-norm of the input difference."""

    kernel: MemoryKernel
    form: CertificateForm = "sum"


class EnsembleSpec(_Frozen):
    initial_box: List[Tuple[float, float]]
    """Per-coordinate interval of the initial-condition set X0."""

    generators: List[SignalGeneratorSpec] = Field(min_length=1)
    """Input templates; pair i uses template i mod len, reseeded per pair."""

    pair_count: int = Field(ge=1)
    grid: TimeGrid
    seed: int = Field(default=0, ge=0)
    input_mode: Literal["independent", "common"] = "independent"
    """"common" drives both runs of a pair with the same input."""

    substeps: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_box(self) -> "EnsembleSpec":
        if not self.initial_box:
            raise ValueError("initial box needs at least one coordinate")
        for lo, hi in self.initial_box:
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
                raise ValueError("initial box must be compact and nonempty")
        return self

    @property
    def state_bound(self) -> float:
        """M_x: largest Euclidean norm over the initial box."""
        return float(math.sqrt(sum(max(abs(lo), abs(hi)) ** 2 for lo, hi in self.initial_box)))

    @property
    def input_bound(self) -> float:
        """M_u: largest amplitude bound among the generator templates."""
        return max(g.bound for g in self.generators)

    def center(self) -> np.ndarray:
        return np.array([(lo + hi) / 2.0 for lo, hi in self.initial_box])


class FmWitness(BaseModel):
    pair: int
    seeds: Tuple[int, int]
    t: float
    margin: float


class FmCheckReport(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    candidate: FmCertificateCandidate
    ensemble: Optional[EnsembleSpec] = None
    tolerance: float = MARGIN_TOL
    per_pair_min: List[Optional[float]]
    """Minimum margin over time per pair; None for diverged pairs."""

    global_min_margin: Optional[float]
    witness: Optional[FmWitness]
    diverged: List[int] = []
    passed: bool = Field(alias="pass")


class BudgetReport(BaseModel):
    candidate: FmCertificateCandidate
    r: float
    t_star: float
    min_post_margin: Optional[float]
    """Minimum over pairs and t >= t_star of beta(|dx(0)|, t) + r - |dy(t)|."""

    witness: Optional[FmWitness]
    clipped_fraction: float
    """Share of samples whose input difference had to be scaled down."""

    passed: bool


class RateTrial(BaseModel):
    rate: float
    required_slope: float
    passed: bool


class FitResult(BaseModel):
    found: bool
    message: str
    rate_hat: Optional[float] = None
    beta: Optional[KLFunction] = None
    gamma_fitted: Optional[GainFunction] = None
    report: Optional[FmCheckReport] = None
    trials: List[RateTrial] = []


class ScreenResult(BaseModel):
    rate: float
    """Exponential kernel rate of the fading-memory half of the screen."""

    increment_slope: Optional[float]
    """Gain slope needed under the plain sup norm; None when no finite slope works."""

    fading_slope: Optional[float]
    passed: bool


@dataclass(frozen=True)
class EnsembleRun:
    """Difference norms of every pair of an ensemble, on one grid."""

    grid: TimeGrid
    pairs: np.ndarray
    seeds: np.ndarray
    dx0: np.ndarray
    dy: np.ndarray
    """(B, N) output difference norms; NaN rows for diverged pairs."""

    du: np.ndarray
    diverged: np.ndarray

    @classmethod
    def concat(cls, runs: Sequence["EnsembleRun"]) -> "EnsembleRun":
        return cls(
            grid=runs[0].grid,
            pairs=np.concatenate([r.pairs for r in runs]),
            seeds=np.concatenate([r.seeds for r in runs]),
            dx0=np.concatenate([r.dx0 for r in runs]),
            dy=np.concatenate([r.dy for r in runs]),
            du=np.concatenate([r.du for r in runs]),
            diverged=np.concatenate([r.diverged for r in runs]),
        )


# ==========================================
# MARGINS
# ==========================================

def _margins(cand: FmCertificateCandidate, dx0, dy, du, grid: TimeGrid) -> np.ndarray:
    t = grid.times - grid.t0
    fading = fading_sup_profile(du, cand.kernel, grid.dt)
    beta_term = np.asarray(cand.beta.value(np.asarray(dx0)[:, None], t[None, :]))
    gamma_term = np.asarray(cand.gamma.value(fading))
    if cand.form == "sum":
        rhs = beta_term + gamma_term
    else:
        rhs = np.maximum(beta_term, gamma_term)
    return rhs - dy


def fm_margin(
    traj_a: Trajectory,
    traj_b: Trajectory,
    u_a: SampledSignal,
    u_b: SampledSignal,
    cand: FmCertificateCandidate,
) -> SampledSignal:
    """Margin RHS(t) - |y_a(t) - y_b(t)| of one pair at every grid time."""
    grid = traj_a.grid
    if traj_b.grid != grid or u_a.grid != grid or u_b.grid != grid:
        raise ShapeError("trajectories and inputs must share one grid")
    dx0 = np.linalg.norm(traj_a.states[0] - traj_b.states[0])
    dy = np.linalg.norm(traj_a.outputs.values - traj_b.outputs.values, axis=1)
    du = np.linalg.norm(u_a.values - u_b.values, axis=1)
    margin = _margins(cand, np.array([dx0]), dy[None, :], du[None, :], grid)[0]
    return SampledSignal(grid=grid, values=margin)


def to_max_form(cand: FmCertificateCandidate) -> FmCertificateCandidate:
    """A sum-form (beta, gamma) certificate also holds in max form with (2 beta, 2 gamma)."""
    if cand.form != "sum":
        raise DomainError("to_max_form expects a sum-form candidate")
    return FmCertificateCandidate(
        beta=cand.beta.scaled(2.0), gamma=cand.gamma.scaled(2.0), kernel=cand.kernel, form="max"
    )


def to_sum_form(cand: FmCertificateCandidate) -> FmCertificateCandidate:
    if cand.form != "max":
        raise DomainError("to_sum_form expects a max-form candidate")
    return cand.model_copy(update={"form": "sum"})


# ==========================================
# ENSEMBLE SIMULATION
# ==========================================

PairTransform = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


def _box_draw(rng, box) -> np.ndarray:
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    return lo + (hi - lo) * rng.random(len(box))


def draw_pairs(model: SystemModel, ens: EnsembleSpec, start: int, stop: int):
    if len(ens.initial_box) != model.state_dim:
        raise ShapeError(f"{model.label}: initial box has {len(ens.initial_box)} coordinates, "
                         f"model has {model.state_dim} states")
    count, n = stop - start, ens.grid.n
    x0a = np.empty((count, model.state_dim))
    x0b = np.empty_like(x0a)
    ua = np.empty((count, n, model.input_dim))
    ub = np.empty_like(ua)
    seeds = np.empty((count, 2), dtype=np.int64)
    for j, pair in enumerate(range(start, stop)):
        # per-pair child stream: independent of chunking and worker count
        child = np.random.SeedSequence(entropy=ens.seed, spawn_key=(pair,))
        rng = np.random.default_rng(child)
        x0a[j] = _box_draw(rng, ens.initial_box)
        x0b[j] = _box_draw(rng, ens.initial_box)
        seed_a, seed_b = (int(s) for s in child.generate_state(2))
        template = ens.generators[pair % len(ens.generators)]
        sig_a = generate_signal(template.model_copy(update={"seed": seed_a}), ens.grid)
        if sig_a.dim != model.input_dim:
            raise ShapeError(f"{model.label}: generator dimension {sig_a.dim} != {model.input_dim}")
        ua[j] = sig_a.values
        if ens.input_mode == "common":
            ub[j] = sig_a.values
            seed_b = seed_a
        else:
            ub[j] = generate_signal(template.model_copy(update={"seed": seed_b}), ens.grid).values
        seeds[j] = (seed_a, seed_b)
    return model.pin(x0a), model.pin(x0b), ua, ub, seeds


def _run_pairs(model, grid, substeps, x0a, x0b, ua, ub, pairs, seeds) -> EnsembleRun:
    run_a = integrate_batch(model, x0a, ua, grid, substeps, on_divergence="mask")
    run_b = integrate_batch(model, x0b, ub, grid, substeps, on_divergence="mask")
    diverged = run_a.diverged | run_b.diverged
    with np.errstate(invalid="ignore"):
        dy = np.linalg.norm(run_a.outputs - run_b.outputs, axis=2)
    dy[diverged] = np.nan
    return EnsembleRun(
        grid=grid,
        pairs=np.asarray(pairs),
        seeds=seeds,
        dx0=np.linalg.norm(x0a - x0b, axis=1),
        dy=dy,
        du=np.linalg.norm(ua - ub, axis=2),
        diverged=diverged,
    )


def _simulate_chunk(model, ens, start, stop, transform: Optional[PairTransform] = None) -> EnsembleRun:
    x0a, x0b, ua, ub, seeds = draw_pairs(model, ens, start, stop)
    if transform is not None:
        ua, ub = transform(ua, ub)
    return _run_pairs(model, ens.grid, ens.substeps, x0a, x0b, ua, ub, np.arange(start, stop), seeds)


def _map_chunks(fn, pair_count: int, chunk: int, workers: int) -> list:
    ranges = [(s, min(s + chunk, pair_count)) for s in range(0, pair_count, chunk)]
    if workers <= 1 or len(ranges) == 1:
        return [fn(s, e) for s, e in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # map keeps chunk order
        return list(pool.map(lambda se: fn(*se), ranges))


def simulate_ensemble(
    model: SystemModel,
    ens: EnsembleSpec,
    workers: int = 1,
    chunk: int = CHUNK_PAIRS,
    transform: Optional[PairTransform] = None,
) -> EnsembleRun:
    runs = _map_chunks(
        lambda s, e: _simulate_chunk(model, ens, s, e, transform), ens.pair_count, chunk, workers
    )
    run = EnsembleRun.concat(runs)
    if run.diverged.any():
        logger.warning("[ensemble] %s: %d of %d pairs diverged", model.label,
                       int(run.diverged.sum()), ens.pair_count)
    return run


# ==========================================
# CHECKING AND FALSIFICATION
# ==========================================

@dataclass
class _Partial:
    per_pair_min: List[Optional[float]]
    witness: Optional[FmWitness]
    diverged: List[int]


def _reduce(run: EnsembleRun, margins: np.ndarray, t_from: int = 0) -> _Partial:
    times = run.grid.times
    per_pair: List[Optional[float]] = []
    witness: Optional[FmWitness] = None
    for row in range(margins.shape[0]):
        if run.diverged[row]:
            per_pair.append(None)
            continue
        seg = margins[row, t_from:]
        k = int(np.argmin(seg))
        m = float(seg[k])
        per_pair.append(m)
        if witness is None or m < witness.margin:
            witness = FmWitness(
                pair=int(run.pairs[row]),
                seeds=(int(run.seeds[row, 0]), int(run.seeds[row, 1])),
                t=float(times[t_from + k]),
                margin=m,
            )
    return _Partial(per_pair, witness, [int(p) for p in run.pairs[run.diverged]])


def _merge(parts: Sequence[_Partial]) -> _Partial:
    merged = _Partial([], None, [])
    for part in parts:
        merged.per_pair_min.extend(part.per_pair_min)
        merged.diverged.extend(part.diverged)
        if part.witness is not None and (merged.witness is None or part.witness.margin < merged.witness.margin):
            merged.witness = part.witness
    return merged


def _report(cand, ens, tol, part: _Partial) -> FmCheckReport:
    global_min = part.witness.margin if part.witness is not None else None
    passed = global_min is not None and global_min >= -tol
    return FmCheckReport(
        candidate=cand,
        ensemble=ens,
        tolerance=tol,
        per_pair_min=part.per_pair_min,
        global_min_margin=global_min,
        witness=part.witness,
        diverged=part.diverged,
        passed=passed,
    )


def evaluate_candidate(
    run: EnsembleRun,
    cand: FmCertificateCandidate,
    tol: float = MARGIN_TOL,
    ensemble: Optional[EnsembleSpec] = None,
) -> FmCheckReport:
    """Check a candidate against an already simulated ensemble."""
    margins = _margins(cand, run.dx0, np.nan_to_num(run.dy), run.du, run.grid)
    return _report(cand, ensemble, tol, _reduce(run, margins))


def falsify_fm(
    model: SystemModel,
    cand: FmCertificateCandidate,
    ens: EnsembleSpec,
    tol: float = MARGIN_TOL,
    workers: int = 1,
    chunk: int = CHUNK_PAIRS,
) -> FmCheckReport:
    """Search the ensemble for a pair violating the candidate; deterministic given the seed."""

    def check_chunk(start: int, stop: int) -> _Partial:
        run = _simulate_chunk(model, ens, start, stop)
        margins = _margins(cand, run.dx0, np.nan_to_num(run.dy), run.du, run.grid)
        return _reduce(run, margins)

    part = _merge(_map_chunks(check_chunk, ens.pair_count, chunk, workers))
    report = _report(cand, ens, tol, part)
    logger.info(
        "[falsify] %s: %d pairs, global min margin %s -> %s",
        model.label, ens.pair_count, report.global_min_margin, "pass" if report.passed else "FAIL",
    )
    return report


# ==========================================
# FITTING
# ==========================================

def fit_decay(run: EnsembleRun) -> ExpDecayKL:
    """beta(r, t) = c r exp(-sigma t) enveloping |dy(t)| / |dx(0)| of common-input pairs."""
    ok = (~run.diverged) & (run.dx0 > 0)
    if not ok.any():
        raise DomainError("decay fit needs at least one finite pair with distinct initial states")
    ratios = run.dy[ok] / run.dx0[ok, None]
    envelope = ratios.max(axis=0)
    t = run.grid.times - run.grid.t0
    c = float(envelope.max()) * (1.0 + DECAY_HEADROOM)
    if c <= 0:
        logger.info("[fit] output ignores the initial state; using a token decay term")
        return ExpDecayKL(gain=LinearGain(slope=DECAY_HEADROOM), rate=1.0 / max(run.grid.horizon, run.grid.dt))
    live = (t > 0) & (envelope > 0)
    if not live.any():
        sigma = 1.0 / max(run.grid.horizon, run.grid.dt)
    else:
        sigma = float(np.min(np.log(c / envelope[live]) / t[live]))
    if sigma <= 0:
        raise NumericError(f"no exponential decay envelope fits (sigma={sigma:.3g})")
    logger.info("[fit] decay envelope c=%.6g sigma=%.6g", c, sigma)
    return ExpDecayKL(gain=LinearGain(slope=c), rate=sigma)


def required_gain_slope(
    run: EnsembleRun,
    beta: KLFunction,
    kernel: MemoryKernel,
    form: CertificateForm = "sum",
    tol: float = MARGIN_TOL,
) -> float:
    """Smallest linear gain slope that makes (beta, slope*r, kernel) pass on the run."""
    live = ~run.diverged
    if not live.any():
        return math.inf
    t = run.grid.times - run.grid.t0
    fading = fading_sup_profile(run.du[live], kernel, run.grid.dt)
    beta_term = np.asarray(beta.value(run.dx0[live, None], t[None, :]))
    dy = run.dy[live]
    if form == "sum":
        residual = dy - beta_term - tol
    else:
        residual = np.where(dy - tol > beta_term, dy - tol, 0.0)
    need = residual > 0
    if not need.any():
        return 0.0
    if np.any(fading[need] <= 0):
        return math.inf
    return float(np.max(residual[need] / fading[need]))


def _adversarial_run(model: SystemModel, ens: EnsembleSpec, rate: float) -> EnsembleRun:
    grid = TimeGrid.from_horizon(ADVERSARIAL_SPAN / rate, ens.grid.dt, ens.grid.t0)
    drive = adversarial_drive(grid, rate, ens.input_bound).values[:, 0]
    ua = np.zeros((1, grid.n, model.input_dim))
    ua[0, :, 0] = drive
    ub = np.zeros_like(ua)
    x0 = model.pin(ens.center()[None, :])
    return _run_pairs(model, grid, ens.substeps, x0, x0.copy(), ua, ub, [-1], np.zeros((1, 2), dtype=np.int64))


def fit_exponential_rate(
    model: SystemModel,
    ens: EnsembleSpec,
    gamma_family: Optional[Sequence[LinearGain]] = None,
    tol: float = MARGIN_TOL,
    rate_floor: Optional[float] = None,
    workers: int = 1,
) -> FitResult:
    """Largest exponential kernel rate alpha admitting a certificate on the ensemble.

    beta comes from common-input pairs, gamma from the declared linear family;
    each trial rate is also tested against the adversarial drive
    M_u exp(-alpha t) over a horizon of ADVERSARIAL_SPAN / alpha.
    """
    family = sorted(gamma_family or [LinearGain(slope=s) for s in DEFAULT_GAMMA_SLOPES],
                    key=lambda g: g.slope)
    horizon = ens.grid.horizon
    floor = rate_floor if rate_floor is not None else 1.0 / horizon
    trials: List[RateTrial] = []

    common = simulate_ensemble(model, ens.model_copy(update={"input_mode": "common"}), workers)
    beta = fit_decay(common)
    run = simulate_ensemble(model, ens.model_copy(update={"input_mode": "independent"}), workers)

    screen = required_gain_slope(run, beta, unit_kernel(horizon), "sum", tol)
    if screen > family[-1].slope:
        logger.info("[fit] %s fails the delta-ISS screen (slope %.4g)", model.label, screen)
        return FitResult(found=False, message="model fails the delta-ISS screen on ensemble",
                         beta=beta, trials=trials)

    def required(rate: float) -> float:
        kernel = ExponentialKernel(rate=rate)
        s = max(required_gain_slope(run, beta, kernel, "sum", tol),
                required_gain_slope(_adversarial_run(model, ens, rate), beta, kernel, "sum", tol))
        ok = s <= family[-1].slope
        trials.append(RateTrial(rate=rate, required_slope=s, passed=ok))
        logger.debug("[fit] rate %.6g needs slope %.6g (%s)", rate, s, "ok" if ok else "no")
        return s

    def passes(rate: float) -> bool:
        return required(rate) <= family[-1].slope

    cap = 1.0 / ens.grid.dt
    lo = hi = RATE_START / horizon
    if passes(lo):
        hi = 2.0 * lo
        while hi <= cap and passes(hi):
            lo, hi = hi, 2.0 * hi
        if hi > cap:
            logger.warning("[fit] %s passes up to the grid rate cap %.4g", model.label, cap)
            hi = lo
    else:
        while True:
            hi, lo = lo, lo / 2.0
            if lo < floor:
                logger.info("[fit] %s: no passing rate above floor %.4g", model.label, floor)
                return FitResult(found=False, message="no exponential certificate found on ensemble",
                                 beta=beta, trials=trials)
            if passes(lo):
                break

    while hi > BISECTION_RATIO * lo:
        mid = math.sqrt(lo * hi)
        if passes(mid):
            lo = mid
        else:
            hi = mid

    slope_needed = next(t.required_slope for t in reversed(trials) if t.rate == lo)
    gamma = next(g for g in family if g.slope >= slope_needed)
    cand = FmCertificateCandidate(beta=beta, gamma=gamma, kernel=ExponentialKernel(rate=lo))
    report = evaluate_candidate(run, cand, tol, ensemble=ens)
    logger.info("[fit] %s: rate_hat=%.6g gamma slope=%.4g", model.label, lo, gamma.slope)
    return FitResult(found=True, message="exponential certificate found", rate_hat=lo,
                     beta=beta, gamma_fitted=gamma, report=report, trials=trials)


def fm_screen(
    model: SystemModel,
    ens: EnsembleSpec,
    slope_limit: float = SCREEN_SLOPE,
    tol: float = MARGIN_TOL,
    workers: int = 1,
) -> ScreenResult:
    """Cheap delta-ISS and fading-memory check from the ensemble center.

    Both runs of every pair start at the center, so no decay term enters.
    The fading half reuses the adversarial drive of the rate fit at a slow
    rate, where any system with fading memory needs only a modest gain.
    """
    center = ens.center()
    horizon = max(ens.grid.horizon, ens.grid.dt)
    rate = min(RATE_START / horizon, SCREEN_RATE)
    screen_ens = ens.model_copy(update={
        "initial_box": [(c, c) for c in center],
        "input_mode": "independent",
        "pair_count": min(ens.pair_count, SCREEN_PAIRS),
    })
    run = simulate_ensemble(model, screen_ens, workers)
    beta = ExpDecayKL(gain=LinearGain(slope=DECAY_HEADROOM), rate=1.0)
    kernel = ExponentialKernel(rate=rate)
    increment = required_gain_slope(run, beta, unit_kernel(horizon), "sum", tol)
    fading = required_gain_slope(run, beta, kernel, "sum", tol)
    if ens.input_bound > 0:
        fading = max(fading, required_gain_slope(_adversarial_run(model, ens, rate), beta, kernel, "sum", tol))
    passed = increment <= slope_limit and fading <= slope_limit
    logger.info("[fit] %s screen: sup-norm slope %.4g, fading slope %.4g at rate %.4g (%s)",
                model.label, increment, fading, rate, "pass" if passed else "fail")
    return ScreenResult(
        rate=rate,
        increment_slope=increment if math.isfinite(increment) else None,
        fading_slope=fading if math.isfinite(fading) else None,
        passed=passed,
    )


# ==========================================
# INPUT BUDGETS
# ==========================================

def input_budget(
    gamma: GainFunction,
    kernel: MemoryKernel,
    r: float,
    t_star: float,
    grid: TimeGrid,
) -> SampledSignal:
    """Pointwise bound on |du(t)| keeping gamma(|du|_w) <= r from t_star on.

    bound(t) = gamma^-1(r) / w(t_star - t) before t_star and gamma^-1(r) after.
    """
    if r <= 0:
        raise DomainError("output mismatch target r must be positive")
    base = float(gamma.inverse(r))
    t = grid.times - grid.t0
    lag = np.clip(t_star - t, 0.0, None)
    w = np.asarray(kernel.weight(lag))
    if np.any(w <= 0):
        raise DomainError("kernel vanishes at a lag needed by the budget")
    return SampledSignal(grid=grid, values=np.where(t <= t_star, base / w, base))


def budget_experiment(
    model: SystemModel,
    cand: FmCertificateCandidate,
    r: float,
    t_star: float,
    ens: EnsembleSpec,
    tol: float = MARGIN_TOL,
    workers: int = 1,
) -> BudgetReport:
    """Scale ensemble input differences down to the budget and check
    |dy(t)| <= beta(|dx(0)|, t) + r for t >= t_star."""
    bound = input_budget(cand.gamma, cand.kernel, r, t_star, ens.grid).values[:, 0]
    clipped = {"hit": 0, "total": 0}

    def clip(ua, ub):
        diff = ub - ua
        norm = np.linalg.norm(diff, axis=2)
        scale = np.where(norm > bound[None, :], bound[None, :] / np.maximum(norm, 1e-300), 1.0)
        clipped["hit"] += int((scale < 1.0).sum())
        clipped["total"] += scale.size
        return ua, ua + diff * scale[:, :, None]

    # counting stays in one thread
    run = simulate_ensemble(model, ens, workers=1, transform=clip)
    t = ens.grid.times - ens.grid.t0
    k_star = int(np.searchsorted(t, t_star - 1e-12))
    beta_term = np.asarray(cand.beta.value(run.dx0[:, None], t[None, :]))
    margins = beta_term + r - np.nan_to_num(run.dy)
    part = _reduce(run, margins, t_from=min(k_star, ens.grid.n - 1))
    min_margin = part.witness.margin if part.witness is not None else None
    fraction = clipped["hit"] / clipped["total"] if clipped["total"] else 0.0
    logger.info("[budget] %s: r=%g t*=%g min post margin %s, %.1f%% samples clipped",
                model.label, r, t_star, min_margin, 100.0 * fraction)
    return BudgetReport(
        candidate=cand, r=r, t_star=t_star, min_post_margin=min_margin, witness=part.witness,
        clipped_fraction=fraction, passed=min_margin is not None and min_margin >= -tol,
    )


# ==========================================
# CERTIFICATES FROM DISSIPATION
# ==========================================

def certificate_from_dissipation(
    lam: float,
    mu: GainFunction,
    input_bound: float,
    lag_grid: Sequence[float],
    gain_points: int = 257,
) -> FmCertificateCandidate:
    """Max-form certificate for a system whose incremental Lyapunov function
    V = |dx|^2 obeys dV/dt <= -lam V + mu(|du|)."""
    if lam <= 0 or input_bound <= 0:
        raise DomainError("need lam > 0 and input_bound > 0")
    kernel = kernel_from_gain(mu, lam, input_bound, lag_grid)
    # input differences never exceed 2 M_u; the headroom absorbs rounding
    args = np.linspace(0.0, 2.0 * input_bound * (1.0 + 1e-6), gain_points)
    values = np.sqrt(4.0 * np.asarray(mu.value(args)) / lam)
    gamma = TabulatedGain(args=tuple(args.tolist()), values=tuple(values.tolist()))
    beta = ExpDecayKL(gain=LinearGain(slope=math.sqrt(2.0)), rate=lam / 2.0)
    return FmCertificateCandidate(beta=beta, gamma=gamma, kernel=kernel, form="max")


def memristor_output_candidate(
    state_cand: FmCertificateCandidate,
    params: MemristorParams,
    current_bound: float,
) -> FmCertificateCandidate:
    """Lift a certificate of the internal state to the voltage output U = M(x) I.

    |dU| <= M_bar |dI| + I_bar lambda_M |dx| gives
    beta' = I_bar lambda_M beta and gamma'(r) = M_bar r + I_bar lambda_M gamma(r),
    in sum form.
    """
    if abs(float(state_cand.kernel.weight(0.0)) - 1.0) > 1e-12:
        raise DomainError("output lifting needs a kernel with w(0) = 1")
    if current_bound <= 0:
        raise DomainError("current bound must be positive")
    cand = to_sum_form(state_cand) if state_cand.form == "max" else state_cand
    factor = current_bound * params.lipschitz
    if factor > 0:
        beta, gamma = cand.beta.scaled(factor), cand.gamma.scaled(factor).plus_linear(params.m_bar)
    else:
        beta, gamma = cand.beta, LinearGain(slope=params.m_bar)
    return FmCertificateCandidate(beta=beta, gamma=gamma, kernel=cand.kernel, form="sum")
