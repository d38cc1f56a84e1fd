import logging
import math

import numpy as np
import pytest

from approximator import (
    RIDGE_GRID,
    CascadeApproximator,
    approx_eval,
    build_filterbank,
    cascade_model,
    capacity_study,
    fit_readout,
    nrmse,
    polynomial_features,
    ridge_path,
    run_bank,
    train_approximator,
)
from comparison import ExpDecayKL, ExponentialKernel, LinearGain
from dynamics import integrate
from errors import DomainError, SingularityError
from fm_analysis import (
    SCREEN_SLOPE,
    EnsembleSpec,
    FmCertificateCandidate,
    falsify_fm,
    required_gain_slope,
    simulate_ensemble,
)
from local_models.counterexamples import counterexample_a3_model
from local_models.lowpass import lowpass_model
from local_models.memristor import MemristorParams, memristor_model
from signals import (
    ConstantSpec,
    PiecewiseConstantSpec,
    SampledSignal,
    SmoothedNoiseSpec,
    TimeGrid,
    generate_signal,
)


def _signals(count=10, horizon=20.0, dt=0.01, amplitude=1.0):
    return EnsembleSpec(
        initial_box=[(0.0, 0.0)],
        generators=[SmoothedNoiseSpec(amplitude=amplitude, correlation_time=0.5)],
        pair_count=count,
        grid=TimeGrid.from_horizon(horizon, dt),
        seed=0,
    )


# ==========================================
# FILTER BANK
# ==========================================

def test_filterbank_rates():
    assert build_filterbank(3, 0.1, 10.0).rates == pytest.approx((0.1, 1.0, 10.0))
    assert build_filterbank(1, 0.5, 2.0).rates == (0.5,)
    with pytest.raises(DomainError):
        build_filterbank(0, 0.1, 1.0)
    with pytest.raises(DomainError):
        build_filterbank(2, 1.0, 1.0)


def test_bank_step_response_settles_at_dc_gain():
    grid = TimeGrid.from_horizon(20.0, 0.01)
    z = run_bank(build_filterbank(1, 2.0, 3.0), generate_signal(ConstantSpec(level=1.0), grid))
    assert z.values[-1, 0] == pytest.approx(0.5, abs=1e-12)


def test_bank_free_response_is_exact():
    grid = TimeGrid.from_horizon(5.0, 0.01)
    bank = build_filterbank(2, 0.5, 3.0)
    z = run_bank(bank, generate_signal(ConstantSpec(level=0.0), grid), z0=[1.0, 1.0])
    np.testing.assert_allclose(z.values[:, 0], np.exp(-0.5 * grid.times), rtol=1e-12)
    np.testing.assert_allclose(z.values[:, 1], np.exp(-3.0 * grid.times), rtol=1e-12)


def test_bank_filter_matches_lowpass():
    grid = TimeGrid.from_horizon(10.0, 0.01)
    u = generate_signal(SmoothedNoiseSpec(amplitude=1.0, correlation_time=0.3, seed=5), grid)
    z = run_bank(build_filterbank(1, 2.0, 3.0), u).values[:, 0]
    y = integrate(lowpass_model(0.5), [0.0], u).outputs.values[:, 0]
    np.testing.assert_allclose(z, 0.5 * y, atol=1e-8)


def test_bank_is_linear():
    grid = TimeGrid.from_horizon(5.0, 0.01)
    bank = build_filterbank(3, 0.2, 5.0)
    u1 = generate_signal(SmoothedNoiseSpec(amplitude=1.0, correlation_time=0.3, seed=1), grid)
    u2 = generate_signal(PiecewiseConstantSpec(levels=5, amplitude=1.0, seed=2), grid)
    mixed = SampledSignal(grid=grid, values=3.0 * u1.values + u2.values)
    np.testing.assert_allclose(
        run_bank(bank, mixed).values,
        3.0 * run_bank(bank, u1).values + run_bank(bank, u2).values,
        atol=1e-12,
    )


# ==========================================
# READOUT
# ==========================================

def test_readout_recovers_a_feature():
    x = np.random.default_rng(0).normal(size=(500, 3))
    readout = fit_readout(x, x[:, 1], degree=1, ridge=1e-10)
    np.testing.assert_allclose(np.asarray(readout.coefficients)[:, 0], [0.0, 0.0, 1.0, 0.0], atol=1e-8)


def test_readout_recovers_a_product():
    x = np.random.default_rng(1).normal(size=(500, 3))
    readout = fit_readout(x, x[:, 0] * x[:, 1], degree=2)
    coefs = np.asarray(readout.coefficients)[:, 0]
    # monomial order: 1, x0, x1, x2, x0x0, x0x1, ...
    assert coefs[5] == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_allclose(np.delete(coefs, 5), 0.0, atol=1e-8)


def test_heavy_ridge_shrinks_coefficients():
    x = np.random.default_rng(2).normal(size=(200, 2))
    readout = fit_readout(x, x[:, 0] + 2.0, degree=1, ridge=1e12)
    assert np.max(np.abs(readout.coefficients)) < 1e-6


def test_constant_readout_error_is_relative_spread():
    x = np.random.default_rng(3).normal(size=(300, 2))
    y = 1.0 + np.random.default_rng(4).normal(size=300)
    readout = fit_readout(x, y, degree=0)
    err = nrmse(readout.predict(x)[:, 0], y)
    assert err == pytest.approx(np.std(y) / math.sqrt(np.mean(y ** 2)), rel=1e-9)


def test_rank_deficient_features_need_ridge():
    a = np.random.default_rng(5).normal(size=(100, 1))
    with pytest.raises(SingularityError):
        fit_readout(np.hstack([a, a]), a[:, 0], degree=1)
    with pytest.raises(SingularityError):
        fit_readout(a[:2], a[:2, 0], degree=3)
    fit_readout(np.hstack([a, a]), a[:, 0], degree=1, ridge=1e-8)


def test_polynomial_feature_count():
    assert polynomial_features(np.ones((4, 3)), 2).shape == (4, 10)


def test_nrmse_edge_cases():
    assert nrmse(np.zeros(3), np.zeros(3)) == 0.0
    assert nrmse(np.ones(3), np.zeros(3)) == math.inf


# ==========================================
# CASCADE
# ==========================================

def test_single_matched_filter_reproduces_lowpass():
    cascade = train_approximator(lowpass_model(1.0), [0.0], _signals(), n_filters=1, degree=1,
                                 ridge=0.0, rate_min=1.0, rate_max=2.0)
    assert cascade.train_nrmse < 1e-6
    assert cascade.val_nrmse < 1e-6
    grid = TimeGrid.from_horizon(20.0, 0.01)
    u = generate_signal(SmoothedNoiseSpec(amplitude=1.0, correlation_time=0.5, seed=123), grid)
    y = integrate(lowpass_model(1.0), [0.0], u).outputs.values
    assert nrmse(approx_eval(cascade, u).values, y) < 1e-6


def test_cascade_model_matches_direct_evaluation():
    cascade = train_approximator(lowpass_model(1.0), [0.0], _signals(), n_filters=3, degree=2,
                                 include_feedthrough=True, rate_min=0.5, rate_max=2.0)
    grid = TimeGrid.from_horizon(10.0, 0.01)
    u = generate_signal(SmoothedNoiseSpec(amplitude=1.0, correlation_time=0.5, seed=77), grid)
    model = cascade_model(cascade)
    assert model.state_dim == 3
    via_model = integrate(model, np.zeros(3), u).outputs.values
    np.testing.assert_allclose(via_model, approx_eval(cascade, u).values, atol=1e-6)


def test_cascade_save_and_load(tmp_path):
    cascade = train_approximator(lowpass_model(1.0), [0.0], _signals(count=5, horizon=5.0),
                                 n_filters=2, degree=2)
    path = tmp_path / "cascade.json"
    cascade.save(path)
    loaded = CascadeApproximator.load(path)
    assert loaded == cascade
    u = generate_signal(SmoothedNoiseSpec(amplitude=1.0, correlation_time=0.5, seed=8),
                        TimeGrid.from_horizon(5.0, 0.01))
    np.testing.assert_array_equal(approx_eval(loaded, u).values, approx_eval(cascade, u).values)


def test_training_needs_a_validation_split():
    with pytest.raises(DomainError):
        train_approximator(lowpass_model(1.0), [0.0], _signals(count=1), n_filters=2, degree=1)
    with pytest.raises(DomainError):
        train_approximator(lowpass_model(1.0), [0.0], _signals(), n_filters=2, degree=1, stride=0)




def test_ridge_is_chosen_from_the_grid():
    cascade = train_approximator(lowpass_model(1.0), [0.0], _signals(), n_filters=3, degree=2,
                                 ridge_grid=RIDGE_GRID)
    assert cascade.ridge in RIDGE_GRID
    assert cascade.ridge_grid == list(RIDGE_GRID)
    with pytest.raises(DomainError):
        train_approximator(lowpass_model(1.0), [0.0], _signals(count=2), n_filters=2, degree=1,
                           ridge_grid=RIDGE_GRID)


def test_ridge_path_matches_direct_fits():
    rng = np.random.default_rng(6)
    x, held_x = rng.normal(size=(300, 3)), rng.normal(size=(100, 3))

    def f(v):
        return np.sin(v[:, 0]) + v[:, 1] * v[:, 2]

    ridges = [1e-6, 1e-2, 1.0]
    scores = ridge_path(x, f(x), held_x, f(held_x), 2, ridges)
    for lam, score in zip(ridges, scores):
        readout = fit_readout(x, f(x), 2, lam)
        assert score == pytest.approx(nrmse(readout.predict(held_x)[:, 0], f(held_x)), rel=1e-6)
    with pytest.raises(DomainError):
        ridge_path(x, f(x), held_x, f(held_x), 2, [0.0])


# ==========================================
# SCREEN AND FADING MEMORY OF THE CASCADE
# ==========================================

def test_growing_time_constant_fails_the_screen(caplog):
    with caplog.at_level(logging.WARNING, logger="approximator"):
        cascade = train_approximator(counterexample_a3_model(), [1.0, 0.0], _signals(count=5, horizon=10.0),
                                     n_filters=2, degree=1)
    assert not cascade.screen.passed
    assert cascade.screen.fading_slope is None or cascade.screen.fading_slope > SCREEN_SLOPE
    assert any("fading-memory screen" in r.getMessage() for r in caplog.records)


def test_lowpass_passes_the_screen_quietly(caplog):
    with caplog.at_level(logging.WARNING, logger="approximator"):
        cascade = train_approximator(lowpass_model(1.0), [0.0], _signals(count=5, horizon=10.0),
                                     n_filters=2, degree=1)
    assert cascade.screen.passed
    assert cascade.screen.increment_slope <= 1.0 + 1e-6
    assert not [r for r in caplog.records if r.levelno >= logging.WARNING]


def test_trained_cascade_has_fading_memory():
    ens = _signals(count=10, horizon=20.0)
    cascade = train_approximator(memristor_model(MemristorParams()), [0.0], ens, n_filters=4, degree=2,
                                 include_feedthrough=True)
    model = cascade_model(cascade)
    bank_ens = ens.model_copy(update={"initial_box": [(0.0, 0.0)] * model.state_dim})
    kernel = ExponentialKernel(rate=min(cascade.bank.rates) / 2.0)
    beta = ExpDecayKL(gain=LinearGain(slope=1.0), rate=1.0)
    slope = required_gain_slope(simulate_ensemble(model, bank_ens), beta, kernel)
    assert 0.0 < slope < math.inf
    cand = FmCertificateCandidate(beta=beta, gamma=LinearGain(slope=1.01 * slope), kernel=kernel)
    assert falsify_fm(model, cand, bank_ens).passed


@pytest.mark.slow
def test_memristor_capacity_is_monotone():
    ens = EnsembleSpec(
        initial_box=[(0.0, 0.0)],
        generators=[
            SmoothedNoiseSpec(amplitude=2.0, correlation_time=1.0),
            PiecewiseConstantSpec(levels=10, amplitude=2.0),
        ],
        pair_count=60,
        grid=TimeGrid.from_horizon(30.0, 0.05),
        seed=0,
    )
    train = {"ridge_grid": RIDGE_GRID, "include_feedthrough": True, "stride": 2}
    study = capacity_study(memristor_model(MemristorParams()), [0.0], ens, [2, 4, 8, 16], degree=3, **train)
    assert [row.n_filters for row in study.rows] == [2, 4, 8, 16]
    assert study.monotone and study.strict_improvement
    baseline = train_approximator(memristor_model(MemristorParams()), [0.0], ens, 2, 1, **train)
    assert study.rows[-1].val_nrmse < baseline.val_nrmse
