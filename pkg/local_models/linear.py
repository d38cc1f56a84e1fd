from dynamics import SystemModel


def linear_scalar_model(pole: float) -> SystemModel:
    """x' = pole * x + u, output x. A positive pole gives the unstable control case."""

    def dynamics(t, x, u):
        return pole * x + u

    def readout(x, u):
        return x

    return SystemModel(
        label="linear",
        state_dim=1,
        input_dim=1,
        output_dim=1,
        dynamics=dynamics,
        readout=readout,
        metadata={"pole": pole},
    )
