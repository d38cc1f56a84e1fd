"""Input-driven ODE models, fixed-step RK4 integration and the sampled
incremental Lyapunov check.

Model callables are vectorized over leading axes: ``dynamics(t, x, u)``
takes ``x`` of shape (..., n) and ``u`` of shape (..., m) and returns
(..., n); ``readout(x, u)`` returns (..., p). A batch of trajectories is
therefore advanced with one call per RK4 stage.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from comparison import GainFunction
from errors import DivergenceError, DomainError, ScopeError, ShapeError
from signals import SampledSignal, TimeGrid

logger = logging.getLogger(__name__)

# Offset of the first/last RK4 stage from the substep ends, relative to the step.
STAGE_NUDGE = 1e-9

DivergencePolicy = Literal["raise", "mask"]


@dataclass(frozen=True)
class SystemModel:
    label: str
    state_dim: int
    input_dim: int
    output_dim: int
    dynamics: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    readout: Callable[[np.ndarray, np.ndarray], np.ndarray]
    time_varying: bool = False
    # (coordinate, value) pairs fixed in every initial condition
    pinned_initial: Tuple[Tuple[int, float], ...] = ()
    # accumulated-input augmentation switches off after this time
    integral_gate: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if min(self.state_dim, self.input_dim, self.output_dim) < 1:
            raise DomainError(f"{self.label}: dimensions must be positive")
        for idx, _ in self.pinned_initial:
            if not 0 <= idx < self.state_dim:
                raise DomainError(f"{self.label}: pinned coordinate {idx} out of range")

    def pin(self, x0s: np.ndarray) -> np.ndarray:
        """Copy of the initial conditions with the pinned coordinates overwritten."""
        out = np.array(x0s, dtype=float)
        for idx, value in self.pinned_initial:
            out[..., idx] = value
        return out


@dataclass(frozen=True)
class Trajectory:
    grid: TimeGrid
    states: np.ndarray
    outputs: SampledSignal

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.states, columns=[f"x{i}" for i in range(self.states.shape[1])])
        frame.insert(0, "t", self.grid.times)
        for i in range(self.outputs.dim):
            frame[f"y{i}"] = self.outputs.values[:, i]
        return frame

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


@dataclass(frozen=True)
class BatchTrajectory:
    grid: TimeGrid
    states: np.ndarray
    """(B, N, n); rows are NaN from their divergence time on."""

    outputs: np.ndarray
    """(B, N, p)."""

    diverged_at: np.ndarray
    """(B,) first non-finite grid time, NaN for rows that stayed finite."""

    @property
    def diverged(self) -> np.ndarray:
        return ~np.isnan(self.diverged_at)


def _check_gate(model: SystemModel, grid: TimeGrid, substeps: int) -> None:
    if model.integral_gate is None:
        return
    h = grid.dt / substeps
    offset = (model.integral_gate - grid.t0) / h
    if abs(offset - round(offset)) > 1e-6:
        logger.warning(
            "[integrate] %s: gate time %g is not on the substep lattice (h=%g); "
            "expect first-order error near the switch",
            model.label, model.integral_gate, h,
        )


def integrate_batch(
    model: SystemModel,
    x0s: np.ndarray,
    u_values: np.ndarray,
    grid: TimeGrid,
    substeps: int = 1,
    on_divergence: DivergencePolicy = "raise",
) -> BatchTrajectory:
    """Classical RK4 with step dt/substeps over a batch of (x0, u) rows.

    The input is interpolated linearly inside each grid step. For
    time-varying models the outer stages are evaluated a hair inside the
    substep, so coefficients that switch on the substep lattice are seen
    from the correct side.
    """
    if substeps < 1:
        raise DomainError("substeps must be >= 1")
    x = np.array(x0s, dtype=float)
    u = np.asarray(u_values, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.state_dim:
        raise ShapeError(f"{model.label}: x0s must have shape (B, {model.state_dim})")
    if u.shape != (x.shape[0], grid.n, model.input_dim):
        raise ShapeError(
            f"{model.label}: inputs must have shape {(x.shape[0], grid.n, model.input_dim)}, got {u.shape}"
        )
    _check_gate(model, grid, substeps)

    batch, n_steps = x.shape[0], grid.n
    dt = grid.dt
    h = dt / substeps
    eps = STAGE_NUDGE * h if model.time_varying else 0.0
    f = model.dynamics

    states = np.empty((batch, n_steps, model.state_dim))
    states[:, 0] = x
    alive = np.ones(batch, dtype=bool)
    diverged_at = np.full(batch, np.nan)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(n_steps - 1):
            u0, du = u[:, k], u[:, k + 1] - u[:, k]
            t_k = grid.t0 + k * dt
            for s in range(substeps):
                off = s * h
                u_a = u0 + du * (off / dt)
                u_m = u0 + du * ((off + 0.5 * h) / dt)
                u_b = u0 + du * ((off + h) / dt)
                k1 = f(t_k + off + eps, x, u_a)
                k2 = f(t_k + off + 0.5 * h, x + 0.5 * h * k1, u_m)
                k3 = f(t_k + off + 0.5 * h, x + 0.5 * h * k2, u_m)
                k4 = f(t_k + off + h - eps, x + h * k3, u_b)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

            bad = alive & ~np.all(np.isfinite(x), axis=1)
            if bad.any():
                t_bad = t_k + dt
                if on_divergence == "raise":
                    row = int(np.flatnonzero(bad)[0])
                    raise DivergenceError(
                        f"{model.label}: non-finite state at t={t_bad:g} (row {row})", time=t_bad, row=row
                    )
                diverged_at[bad] = t_bad
                alive &= ~bad
                logger.info("[integrate] %s: %d row(s) diverged at t=%g", model.label, int(bad.sum()), t_bad)
            x[~alive] = 0.0
            states[:, k + 1] = x
            states[~alive, k + 1] = np.nan

        outputs = np.asarray(model.readout(states, u), dtype=float)
    return BatchTrajectory(grid=grid, states=states, outputs=outputs, diverged_at=diverged_at)


def integrate(model: SystemModel, x0, u: SampledSignal, substeps: int = 1) -> Trajectory:
    x0_arr = np.asarray(x0, dtype=float).reshape(-1)
    if u.dim != model.input_dim:
        raise ShapeError(f"{model.label}: input dimension {u.dim} != {model.input_dim}")
    run = integrate_batch(model, x0_arr[None, :], u.values[None], u.grid, substeps)
    return Trajectory(
        grid=u.grid,
        states=run.states[0],
        outputs=SampledSignal(grid=u.grid, values=run.outputs[0]),
    )


# ==========================================
# SAMPLED INCREMENTAL LYAPUNOV CHECK
# ==========================================

Box = List[Tuple[float, float]]


class LyapunovCheckSpec(BaseModel):
    """Sampled check of the implication kappa(|dx|) >= |du|  =>  dV/dt <= -rho(|dx|)
    for the quadratic incremental candidate V = |x_a - x_b|^2."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kappa: GainFunction
    rho: GainFunction
    """Positive-definite decrease rate, reused from the gain families."""

    state_box: Box
    """Per-coordinate sampling interval for x_a and x_b."""

    input_box: Box
    samples: int = Field(default=100_000, ge=1)
    seed: int = Field(default=0, ge=0)
    slack: float = Field(default=1e-9, ge=0)
    chunk: int = Field(default=8192, ge=1)
    max_witnesses: int = Field(default=10, ge=0)

    @model_validator(mode="after")
    def _check_boxes(self) -> "LyapunovCheckSpec":
        for lo, hi in list(self.state_box) + list(self.input_box):
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
                raise ValueError("sampling boxes must be finite and nonempty")
        if not self.state_box or not self.input_box:
            raise ValueError("sampling boxes must have at least one coordinate")
        return self


class LyapunovWitness(BaseModel):
    index: int
    x_a: List[float]
    x_b: List[float]
    u_a: List[float]
    u_b: List[float]
    v_dot: float
    bound: float
    """-rho(|dx|) + slack, the value v_dot exceeded."""


class LyapunovReport(BaseModel):
    samples: int
    admissible: int
    """Samples satisfying the premise kappa(|dx|) >= |du|."""

    violation_count: int
    first_violation_index: Optional[int] = None
    violations: List[LyapunovWitness] = []

    @property
    def passed(self) -> bool:
        return self.violation_count == 0


def _uniform(rng, box: Box, size: int) -> np.ndarray:
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    return lo + (hi - lo) * rng.random((size, len(box)))


def lyapunov_sample_check(model: SystemModel, spec: LyapunovCheckSpec) -> LyapunovReport:
    if model.time_varying:
        raise ScopeError(f"{model.label}: Lyapunov sampling needs a time-invariant model")
    if len(spec.state_box) != model.state_dim or len(spec.input_box) != model.input_dim:
        raise ShapeError(f"{model.label}: sampling boxes do not match model dimensions")

    rng = np.random.default_rng(spec.seed)
    admissible_total = 0
    count = 0
    first: Optional[int] = None
    witnesses: List[LyapunovWitness] = []

    done = 0
    while done < spec.samples:
        size = min(spec.chunk, spec.samples - done)
        xa = _uniform(rng, spec.state_box, size)
        xb = _uniform(rng, spec.state_box, size)
        ua = _uniform(rng, spec.input_box, size)
        ub = _uniform(rng, spec.input_box, size)

        dx = xa - xb
        dx_norm = np.linalg.norm(dx, axis=1)
        du_norm = np.linalg.norm(ua - ub, axis=1)
        admissible = np.asarray(spec.kappa.value(dx_norm)) >= du_norm
        v_dot = 2.0 * np.sum(dx * (model.dynamics(0.0, xa, ua) - model.dynamics(0.0, xb, ub)), axis=1)
        bound = -np.asarray(spec.rho.value(dx_norm)) + spec.slack
        violated = admissible & (v_dot > bound)

        admissible_total += int(admissible.sum())
        hits = np.flatnonzero(violated)
        count += hits.size
        if hits.size and first is None:
            first = done + int(hits[0])
        for i in hits[: max(spec.max_witnesses - len(witnesses), 0)]:
            witnesses.append(LyapunovWitness(
                index=done + int(i),
                x_a=xa[i].tolist(), x_b=xb[i].tolist(),
                u_a=ua[i].tolist(), u_b=ub[i].tolist(),
                v_dot=float(v_dot[i]), bound=float(bound[i]),
            ))
        done += size

    logger.info(
        "[lyapunov] %s: %d/%d admissible samples, %d violation(s)",
        model.label, admissible_total, spec.samples, count,
    )
    return LyapunovReport(
        samples=spec.samples,
        admissible=admissible_total,
        violation_count=count,
        first_violation_index=first,
        violations=witnesses,
    )
