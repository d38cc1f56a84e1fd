"""First-order low-pass filter tau*y' = -y + u and its convolution-integral oracle."""
import numpy as np
from scipy.signal import lfilter

from dynamics import SystemModel
from errors import DomainError
from signals import SampledSignal


def lowpass_model(tau: float) -> SystemModel:
    if tau <= 0:
        raise DomainError("time constant tau must be positive")

    def dynamics(t, x, u):
        return (u - x) / tau

    def readout(x, u):
        return x

    return SystemModel(
        label="lowpass",
        state_dim=1,
        input_dim=1,
        output_dim=1,
        dynamics=dynamics,
        readout=readout,
        metadata={"tau": tau},
    )


def convolution_oracle(tau: float, u: SampledSignal, x0) -> SampledSignal:
    """y(t) = exp(-t/tau) x0 + (1/tau) int_0^t exp(-(t-s)/tau) u(s) ds by trapezoidal quadrature.

    The integral follows the recursion
    I[k+1] = e I[k] + dt/2 (e u[k] + u[k+1]) with e = exp(-dt/tau), I[0] = 0.
    """
    if tau <= 0:
        raise DomainError("time constant tau must be positive")
    dt = u.grid.dt
    decay = np.exp(-dt / tau)
    b = [0.5 * dt, 0.5 * dt * decay]
    a = [1.0, -decay]
    zi = -0.5 * dt * u.values[:1]
    integral, _ = lfilter(b, a, u.values, axis=0, zi=zi)
    free = np.exp(-(u.grid.times - u.grid.t0) / tau)[:, None] * np.asarray(x0, dtype=float)
    return SampledSignal(grid=u.grid, values=free + integral / tau)
