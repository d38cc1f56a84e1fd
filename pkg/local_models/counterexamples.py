"""Three systems with incremental stability defects that rule out fading memory.

cex-a1: x' = -x + int_0^min(1,t) u ds, realized with an accumulator z that
        integrates u while t <= 1 and freezes afterwards.
cex-a2: x' = (-x + u) / (t + 1), a filter whose time constant grows without bound.
cex-a3: x1' = -x1^2, x2' = x1 (-x2 + u); with x1(0) = 1 it reduces to cex-a2.
"""
import numpy as np

from dynamics import SystemModel

GATE_TIME = 1.0


def counterexample_a1_model() -> SystemModel:
    def dynamics(t, state, u):
        x, z = state[..., 0], state[..., 1]
        gate = 1.0 if t <= GATE_TIME else 0.0
        return np.stack([-x + z, gate * u[..., 0]], axis=-1)

    def readout(state, u):
        return state[..., :1]

    return SystemModel(
        label="cex-a1",
        state_dim=2,
        input_dim=1,
        output_dim=1,
        dynamics=dynamics,
        readout=readout,
        time_varying=True,
        pinned_initial=((1, 0.0),),
        integral_gate=GATE_TIME,
    )


def counterexample_a2_model() -> SystemModel:
    def dynamics(t, x, u):
        return (u - x) / (t + 1.0)

    def readout(x, u):
        return x

    return SystemModel(
        label="cex-a2",
        state_dim=1,
        input_dim=1,
        output_dim=1,
        dynamics=dynamics,
        readout=readout,
        time_varying=True,
    )


def counterexample_a3_model() -> SystemModel:
    def dynamics(t, state, u):
        x1, x2 = state[..., 0], state[..., 1]
        return np.stack([-x1 * x1, x1 * (u[..., 0] - x2)], axis=-1)

    def readout(state, u):
        return state[..., 1:2]

    return SystemModel(
        label="cex-a3",
        state_dim=2,
        input_dim=1,
        output_dim=1,
        dynamics=dynamics,
        readout=readout,
        pinned_initial=((0, 1.0),),
    )
