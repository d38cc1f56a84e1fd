"""Charge-controlled memristor U = M(x) I with relaxing internal state.

Internal dynamics x' = -a x + tanh(I / saturation) contract at rate a and
are driven through a 1-Lipschitz map of the current. The memristance
M(x) = r0 + r_m tanh(x) is |r_m|-Lipschitz and stays in [r0 - |r_m|, r0 + |r_m|].
"""
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from dynamics import SystemModel


class MemristorParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    a: float = Field(default=1.0, gt=0)
    """Relaxation rate of the internal state (1/time)."""

    saturation: float = Field(default=1.0, gt=0)
    """Current scale of the tanh drive map."""

    r0: float = Field(default=1.0, gt=0)
    """Base memristance."""

    r_m: float = 0.5
    """Modulation depth; |r_m| < r0 keeps M(x) positive."""

    @model_validator(mode="after")
    def _check_positive_memristance(self) -> "MemristorParams":
        if abs(self.r_m) >= self.r0:
            raise ValueError("modulation depth must satisfy |r_m| < r0")
        return self

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant of M."""
        return abs(self.r_m)

    @property
    def m_bar(self) -> float:
        """Upper bound of M."""
        return self.r0 + abs(self.r_m)

    def memristance(self, x):
        return self.r0 + self.r_m * np.tanh(x)


def memristor_model(
    p: MemristorParams,
    output: Literal["voltage", "state"] = "voltage",
) -> SystemModel:
    """Voltage output has direct feedthrough of the current; "state" exposes x itself."""
    if output not in ("voltage", "state"):
        raise ValueError(f"unknown memristor output {output!r}")

    def dynamics(t, x, u):
        return -p.a * x + np.tanh(u / p.saturation)

    if output == "voltage":
        def readout(x, u):
            return p.memristance(x) * u
        label = "memristor"
    else:
        def readout(x, u):
            return x
        label = "memristor-state"

    return SystemModel(
        label=label,
        state_dim=1,
        input_dim=1,
        output_dim=1,
        dynamics=dynamics,
        readout=readout,
        metadata={"params": p.model_dump(), "output": output},
    )
