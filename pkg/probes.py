"""Convergent-input/convergent-output and periodic-input/periodic-output probes."""
from __future__ import annotations

import logging
import math
from typing import List, Sequence

import numpy as np
from pydantic import BaseModel

from dynamics import SystemModel, integrate
from errors import DomainError, ShapeError
from signals import SampledSignal, TimeGrid

logger = logging.getLogger(__name__)

PROBE_TOL = 1e-4
# Gaps at or below this are treated as converged and get no ratio.
GAP_NOISE_FLOOR = 1e-12


class CicoResult(BaseModel):
    converged: bool
    tail_sup: float
    """sup of |y_a - y_b| over the tail window."""

    input_tail_sup: float
    tail_start: float
    tol: float


class PipoResult(BaseModel):
    steps_per_period: int
    burn_in_index: int
    period_map_gaps: List[float]
    """d_k = sup over one period of |y(b + kT + s) - y(b + (k+1)T + s)|."""

    gap_ratios: List[float]
    limit_t0: float
    dt: float
    limit_values: List[List[float]]
    """Output samples over the last simulated period."""

    limit_amplitude: float
    phase_lag: float
    """Phase of the input fundamental minus that of the output, in (-pi, pi]."""

    def limit_waveform(self) -> SampledSignal:
        grid = TimeGrid(t0=self.limit_t0, dt=self.dt, n=len(self.limit_values))
        return SampledSignal(grid=grid, values=np.array(self.limit_values))


def cico_probe(
    model: SystemModel,
    x0s: Sequence,
    u_a: SampledSignal,
    u_b: SampledSignal,
    tail_start: float,
    tol: float = PROBE_TOL,
    substeps: int = 1,
) -> CicoResult:
    """Do outputs of two runs converge when their input difference does?"""
    if u_a.grid != u_b.grid:
        raise ShapeError("probe inputs must share one grid")
    x0a, x0b = x0s
    traj_a = integrate(model, x0a, u_a, substeps)
    traj_b = integrate(model, x0b, u_b, substeps)
    tail = u_a.grid.times >= tail_start - 1e-12
    if not tail.any():
        raise DomainError(f"tail window starting at {tail_start} is empty")
    dy = np.linalg.norm(traj_a.outputs.values - traj_b.outputs.values, axis=1)
    du = np.linalg.norm(u_a.values - u_b.values, axis=1)
    tail_sup = float(dy[tail].max())
    input_tail = float(du[tail].max())
    if input_tail >= tol:
        logger.warning("[cico] %s: input difference %.3g has not decayed below %.3g in the tail",
                       model.label, input_tail, tol)
    result = CicoResult(converged=tail_sup < tol, tail_sup=tail_sup, input_tail_sup=input_tail,
                        tail_start=tail_start, tol=tol)
    logger.info("[cico] %s: tail sup %.6g -> %s", model.label, tail_sup,
                "converged" if result.converged else "NOT converged")
    return result


def _fundamental_phase(values: np.ndarray) -> float:
    return float(np.angle(np.fft.rfft(values)[1]))


def pipo_probe(
    model: SystemModel,
    x0,
    u: SampledSignal,
    period: float,
    periods: int,
    burn_in: float = 0.0,
    substeps: int = 1,
) -> PipoResult:
    """Period-map gaps and the limit waveform for a T-periodic input."""
    dt = u.grid.dt
    ratio = period / dt
    steps = int(round(ratio))
    if steps < 2 or abs(ratio - steps) > 1e-9 * max(1.0, ratio):
        raise DomainError(f"period {period} is not a multiple of dt={dt}")
    if periods < 2:
        raise DomainError("need at least two periods")
    b = int(math.ceil(burn_in / dt - 1e-9))
    if b + periods * steps > u.grid.n:
        raise DomainError(
            f"horizon of {u.grid.n} samples is shorter than burn-in plus {periods} periods"
        )

    traj = integrate(model, x0, u, substeps)
    y = traj.outputs.values
    segments = [y[b + k * steps: b + (k + 1) * steps] for k in range(periods)]
    gaps = [float(np.linalg.norm(segments[k] - segments[k + 1], axis=1).max()) for k in range(periods - 1)]
    ratios = [gaps[k + 1] / gaps[k] for k in range(len(gaps) - 1)
              if gaps[k] > GAP_NOISE_FLOOR and gaps[k + 1] > GAP_NOISE_FLOOR]

    start = b + (periods - 1) * steps
    limit = segments[-1]
    u_last = u.values[start: start + steps, 0]
    lag = _fundamental_phase(u_last) - _fundamental_phase(limit[:, 0])
    lag = math.atan2(math.sin(lag), math.cos(lag))

    result = PipoResult(
        steps_per_period=steps,
        burn_in_index=b,
        period_map_gaps=gaps,
        gap_ratios=ratios,
        limit_t0=float(u.grid.times[start]),
        dt=dt,
        limit_values=limit.tolist(),
        limit_amplitude=float((limit[:, 0].max() - limit[:, 0].min()) / 2.0),
        phase_lag=lag,
    )
    logger.info("[pipo] %s: gaps %s", model.label, ", ".join(f"{g:.3g}" for g in gaps))
    return result
