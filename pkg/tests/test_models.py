import math

import numpy as np
import pytest
from pydantic import ValidationError

from dynamics import integrate, integrate_batch
from local_models.counterexamples import (
    counterexample_a1_model,
    counterexample_a2_model,
    counterexample_a3_model,
)
from local_models.lowpass import lowpass_model
from local_models.memristor import MemristorParams, memristor_model
from signals import (
    ConstantSpec,
    ExponentialSpec,
    PiecewiseConstantSpec,
    TimeGrid,
    WindowSpec,
    generate_signal,
)


# ==========================================
# MEMRISTOR
# ==========================================

def test_memristor_params_validation():
    with pytest.raises(ValidationError):
        MemristorParams(r0=1.0, r_m=1.0)
    p = MemristorParams(r_m=-0.25)
    assert p.lipschitz == 0.25
    assert p.m_bar == 1.25


def test_memristor_zero_current_gives_zero_voltage():
    grid = TimeGrid.from_horizon(5.0, 0.01)
    traj = integrate(memristor_model(MemristorParams()), [0.7], generate_signal(ConstantSpec(level=0.0), grid))
    np.testing.assert_array_equal(traj.outputs.values, 0.0)


def test_memristor_constant_current():
    grid = TimeGrid.from_horizon(30.0, 0.01)
    traj = integrate(memristor_model(MemristorParams()), [0.0], generate_signal(ConstantSpec(level=1.0), grid))
    assert traj.outputs.values[0, 0] == pytest.approx(1.0)
    steady = 1.0 + 0.5 * math.tanh(math.tanh(1.0))
    assert traj.outputs.values[-1, 0] == pytest.approx(steady, abs=1e-6)


def test_memristor_state_output():
    model = memristor_model(MemristorParams(), "state")
    assert model.label == "memristor-state"
    with pytest.raises(ValueError):
        memristor_model(MemristorParams(), "charge")


# ==========================================
# COUNTEREXAMPLES
# ==========================================

def test_a1_keeps_memory_of_the_window():
    model = counterexample_a1_model()
    grid = TimeGrid.from_horizon(5.0, 0.01)
    u = generate_signal(WindowSpec(amplitude=1.0, start=0.0, stop=1.0), grid)
    traj = integrate(model, model.pin([0.0, 0.0]), u)
    assert traj.outputs.values[100, 0] == pytest.approx(math.exp(-1.0), abs=1e-5)
    closed = 1.0 - (1.0 - math.exp(-1.0)) * math.exp(-4.0)
    assert traj.outputs.values[-1, 0] == pytest.approx(closed, abs=1e-5)
    # the accumulator froze at the window integral
    assert traj.states[-1, 1] == pytest.approx(1.0, abs=1e-9)


def test_a1_pins_the_accumulator():
    assert counterexample_a1_model().pin([[3.0, 4.0]]).tolist() == [[3.0, 0.0]]


def test_a2_unit_input():
    grid = TimeGrid.from_horizon(4.0, 0.01)
    traj = integrate(counterexample_a2_model(), [0.0], generate_signal(ConstantSpec(level=1.0), grid))
    assert traj.states[-1, 0] == pytest.approx(0.8, abs=1e-6)


def test_a2_free_response():
    grid = TimeGrid.from_horizon(4.0, 0.01)
    traj = integrate(counterexample_a2_model(), [2.0], generate_signal(ConstantSpec(level=0.0), grid))
    np.testing.assert_allclose(traj.states[:, 0], 2.0 / (grid.times + 1.0), atol=1e-6)


def test_a2_exponential_drive():
    horizon = 10.0
    grid = TimeGrid.from_horizon(horizon, 0.01)
    u = generate_signal(ExponentialSpec(amplitude=math.exp(horizon), rate=1.0), grid)
    x_end = integrate(counterexample_a2_model(), [0.0], u).states[-1, 0]
    closed = (math.exp(horizon) - 1.0) / (horizon + 1.0)
    assert closed == pytest.approx(2002.19, rel=1e-3)
    assert x_end == pytest.approx(closed, rel=1e-3)


def test_a3_first_coordinate():
    model = counterexample_a3_model()
    grid = TimeGrid.from_horizon(5.0, 0.01)
    traj = integrate(model, model.pin([0.0, 0.0]), generate_signal(ConstantSpec(level=0.0), grid))
    np.testing.assert_allclose(traj.states[:, 0], 1.0 / (grid.times + 1.0), atol=1e-6)


def test_a3_reduces_to_a2():
    a2, a3 = counterexample_a2_model(), counterexample_a3_model()
    grid = TimeGrid.from_horizon(20.0, 0.01)
    inputs = np.stack([
        generate_signal(PiecewiseConstantSpec(levels=10, amplitude=1.0, seed=s), grid).values
        for s in range(20)
    ])
    c = np.linspace(-1.0, 1.0, 20)[:, None]
    x = integrate_batch(a2, c, inputs, grid).outputs
    x2 = integrate_batch(a3, a3.pin(np.hstack([np.zeros_like(c), c])), inputs, grid).outputs
    assert np.max(np.abs(x - x2)) <= 1e-5


def test_lowpass_rejects_bad_tau():
    with pytest.raises(ValueError):
        lowpass_model(0.0)
