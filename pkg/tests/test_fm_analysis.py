import math

import numpy as np
import pytest
from pydantic import ValidationError

from comparison import (
    ExpDecayKL,
    ExponentialKernel,
    LinearGain,
    PolynomialGain,
    TabulatedKernel,
    gain_eval,
    unit_kernel,
)
from dynamics import SystemModel, integrate
from errors import DomainError
from fm_analysis import (
    EnsembleSpec,
    FmCertificateCandidate,
    budget_experiment,
    certificate_from_dissipation,
    draw_pairs,
    evaluate_candidate,
    falsify_fm,
    fit_decay,
    fit_exponential_rate,
    fm_margin,
    fm_screen,
    input_budget,
    memristor_output_candidate,
    required_gain_slope,
    simulate_ensemble,
    to_max_form,
    to_sum_form,
)
from local_models.counterexamples import counterexample_a2_model
from local_models.lowpass import lowpass_model
from local_models.memristor import MemristorParams, memristor_model
from signals import (
    ConstantSpec,
    PiecewiseConstantSpec,
    SmoothedNoiseSpec,
    TimeGrid,
    generate_signal,
)

LAGS = np.linspace(0.0, 20.0, 201)


def _ensemble(tau=1.0, pairs=100, amplitude=1.0, box=(-1.0, 1.0), seed=0, **overrides):
    base = dict(
        initial_box=[box],
        generators=[
            PiecewiseConstantSpec(levels=10, amplitude=amplitude),
            SmoothedNoiseSpec(amplitude=amplitude, correlation_time=tau),
        ],
        pair_count=pairs,
        grid=TimeGrid.from_horizon(20.0 * tau, tau / 100.0),
        seed=seed,
    )
    base.update(overrides)
    return EnsembleSpec(**base)


def _lowpass_candidate(tau=1.0, slope=2.0, kernel_rate=None, form="sum"):
    return FmCertificateCandidate(
        beta=ExpDecayKL(gain=LinearGain(slope=1.0), rate=1.0 / tau),
        gamma=LinearGain(slope=slope),
        kernel=ExponentialKernel(rate=kernel_rate or 1.0 / (2.0 * tau)),
        form=form,
    )


# ==========================================
# ENSEMBLES
# ==========================================

def test_ensemble_validation_and_bounds():
    with pytest.raises(ValidationError):
        _ensemble(box=(1.0, -1.0))
    ens = EnsembleSpec(
        initial_box=[(-1.0, 2.0), (-3.0, 1.0)],
        generators=[ConstantSpec(level=0.5), SmoothedNoiseSpec(amplitude=2.0, correlation_time=1.0)],
        pair_count=1,
        grid=TimeGrid(dt=0.1, n=2),
    )
    assert ens.state_bound == pytest.approx(math.sqrt(13.0))
    assert ens.input_bound == 2.0
    np.testing.assert_allclose(ens.center(), [0.5, -1.0])


def test_pairs_do_not_depend_on_chunking():
    model, ens = lowpass_model(1.0), _ensemble(pairs=10)
    x0a, x0b, ua, ub, seeds = draw_pairs(model, ens, 0, 10)
    y0a, y0b, va, vb, more = draw_pairs(model, ens, 5, 6)
    np.testing.assert_array_equal(x0a[5], y0a[0])
    np.testing.assert_array_equal(ub[5], vb[0])
    assert tuple(seeds[5]) == tuple(more[0])


def test_common_mode_shares_the_input():
    model = lowpass_model(1.0)
    _, _, ua, ub, seeds = draw_pairs(model, _ensemble(pairs=4, input_mode="common"), 0, 4)
    np.testing.assert_array_equal(ua, ub)
    assert all(a == b for a, b in seeds)


def test_box_dimension_must_match_model():
    with pytest.raises(ValueError):
        draw_pairs(lowpass_model(1.0), _ensemble(initial_box=[(-1.0, 1.0), (0.0, 1.0)]), 0, 1)


def test_simulation_is_chunk_invariant():
    model, ens = lowpass_model(1.0), _ensemble(pairs=20)
    small = simulate_ensemble(model, ens, chunk=7)
    whole = simulate_ensemble(model, ens)
    np.testing.assert_allclose(small.dy, whole.dy, rtol=1e-12, atol=0.0)
    np.testing.assert_array_equal(small.pairs, np.arange(20))


# ==========================================
# MARGINS AND FALSIFICATION
# ==========================================

def test_identical_runs_have_zero_margin():
    grid = TimeGrid.from_horizon(5.0, 0.05)
    u = generate_signal(SmoothedNoiseSpec(amplitude=1.0, correlation_time=0.5, seed=2), grid)
    traj = integrate(lowpass_model(1.0), [0.4], u)
    margin = fm_margin(traj, traj, u, u, _lowpass_candidate())
    np.testing.assert_array_equal(margin.values, 0.0)


def test_lowpass_certificate_passes():
    report = falsify_fm(lowpass_model(1.0), _lowpass_candidate(), _ensemble(pairs=200))
    assert report.passed
    assert report.global_min_margin >= -1e-7
    assert len(report.per_pair_min) == 200
    assert report.model_dump(by_alias=True)["pass"] is True


@pytest.mark.parametrize("tau", [0.5, 2.0])
def test_lowpass_certificate_scales_with_tau(tau):
    report = falsify_fm(lowpass_model(tau), _lowpass_candidate(tau), _ensemble(tau, pairs=100))
    assert report.passed


def test_shrunken_gain_is_falsified():
    report = falsify_fm(lowpass_model(1.0), _lowpass_candidate(slope=0.01), _ensemble(pairs=100))
    assert not report.passed
    assert report.witness is not None
    assert report.witness.margin == report.global_min_margin < 0
    assert report.per_pair_min[report.witness.pair] == pytest.approx(report.witness.margin)


def test_falsification_ignores_worker_count():
    model, cand, ens = lowpass_model(1.0), _lowpass_candidate(slope=0.5), _ensemble(pairs=60)
    one = falsify_fm(model, cand, ens, workers=1, chunk=16)
    three = falsify_fm(model, cand, ens, workers=3, chunk=16)
    assert one.model_dump() == three.model_dump()


def test_slower_kernel_only_raises_margins():
    model, ens = lowpass_model(1.0), _ensemble(pairs=100)
    fast = falsify_fm(model, _lowpass_candidate(), ens)
    slow = falsify_fm(model, _lowpass_candidate(kernel_rate=0.25), ens)
    assert slow.passed
    assert slow.global_min_margin >= fast.global_min_margin


def test_form_conversions():
    sum_cand = _lowpass_candidate()
    max_cand = to_max_form(sum_cand)
    assert max_cand.form == "max"
    assert gain_eval(max_cand.gamma, 1.0) == pytest.approx(4.0)
    assert falsify_fm(lowpass_model(1.0), max_cand, _ensemble(pairs=100)).passed
    assert to_sum_form(max_cand).form == "sum"
    with pytest.raises(DomainError):
        to_max_form(max_cand)
    with pytest.raises(DomainError):
        to_sum_form(sum_cand)


def test_common_input_reduces_to_transient_check():
    report = falsify_fm(lowpass_model(1.0), _lowpass_candidate(slope=1e-9),
                        _ensemble(pairs=100, input_mode="common"))
    assert report.passed


def test_diverged_pairs_are_reported():
    def dynamics(t, x, u):
        return x * x + 0.0 * u

    model = SystemModel(label="blowup", state_dim=1, input_dim=1, output_dim=1,
                        dynamics=dynamics, readout=lambda x, u: x)
    ens = _ensemble(pairs=4, box=(1.0, 2.0), grid=TimeGrid.from_horizon(3.0, 0.01))
    report = falsify_fm(model, _lowpass_candidate(), ens)
    assert report.diverged == [0, 1, 2, 3]
    assert report.per_pair_min == [None] * 4
    assert not report.passed


# ==========================================
# FITTING
# ==========================================

def test_decay_fit_on_lowpass():
    run = simulate_ensemble(lowpass_model(1.0), _ensemble(pairs=50, input_mode="common"))
    beta = fit_decay(run)
    assert beta.gain.slope == pytest.approx(1.001, rel=1e-3)
    assert beta.rate == pytest.approx(1.0, abs=0.01)


def test_required_slope_on_lowpass_is_at_most_one():
    model = lowpass_model(1.0)
    ens = _ensemble(pairs=100)
    beta = fit_decay(simulate_ensemble(model, ens.model_copy(update={"input_mode": "common"})))
    run = simulate_ensemble(model, ens)
    slope = required_gain_slope(run, beta, unit_kernel(ens.grid.horizon))
    assert 0.0 < slope <= 1.0 + 1e-6


def test_evaluate_candidate_matches_falsify():
    model, cand, ens = lowpass_model(1.0), _lowpass_candidate(slope=0.3), _ensemble(pairs=50)
    direct = evaluate_candidate(simulate_ensemble(model, ens), cand, ensemble=ens)
    assert direct.per_pair_min == pytest.approx(falsify_fm(model, cand, ens).per_pair_min)


@pytest.mark.parametrize("tau, expected", [(1.0, 0.5), (2.0, 0.25)])
def test_lowpass_rate_fit(tau, expected):
    result = fit_exponential_rate(lowpass_model(tau), _ensemble(tau, pairs=100))
    assert result.found
    assert expected <= result.rate_hat <= 1.05 * expected
    assert result.gamma_fitted.slope <= 2.0
    assert result.report.passed
    assert result.trials


def test_growing_time_constant_has_no_exponential_certificate():
    result = fit_exponential_rate(counterexample_a2_model(), _ensemble(pairs=50))
    assert not result.found
    assert result.message == "no exponential certificate found on ensemble"
    assert all(not t.passed for t in result.trials)


# ==========================================
# BUDGETS
# ==========================================

def test_input_budget_values():
    grid = TimeGrid.from_horizon(3.0, 0.1)
    bound = input_budget(LinearGain(slope=2.0), ExponentialKernel(rate=1.0), 0.1, 1.0, grid).values[:, 0]
    assert bound[0] == pytest.approx(0.05 * math.e)
    assert bound[10] == pytest.approx(0.05)
    assert bound[20] == pytest.approx(0.05)


def test_unit_kernel_budget_is_flat():
    grid = TimeGrid.from_horizon(3.0, 0.1)
    bound = input_budget(LinearGain(slope=1.0), unit_kernel(3.0), 0.2, 2.0, grid).values[:, 0]
    np.testing.assert_allclose(bound, 0.2)


def test_budget_rejects_vanishing_kernel():
    grid = TimeGrid.from_horizon(3.0, 0.1)
    kernel = TabulatedKernel(lags=(0.0, 1.0), weights=(1.0, 0.0))
    with pytest.raises(DomainError):
        input_budget(LinearGain(slope=1.0), kernel, 0.1, 2.0, grid)
    with pytest.raises(DomainError):
        input_budget(LinearGain(slope=1.0), kernel, 0.0, 0.5, grid)


def test_budget_experiment_on_lowpass():
    report = budget_experiment(lowpass_model(1.0), _lowpass_candidate(), 0.1, 5.0,
                               _ensemble(pairs=100, grid=TimeGrid.from_horizon(10.0, 0.01)))
    assert report.passed
    assert report.clipped_fraction > 0.0



def test_budget_soundness_after_cutoff():
    cand = _lowpass_candidate(slope=2.0, kernel_rate=0.5)
    ens = _ensemble(pairs=1000, grid=TimeGrid.from_horizon(10.0, 0.01))
    report = budget_experiment(lowpass_model(1.0), cand, 0.1, 2.0, ens, tol=1e-6)
    assert report.passed
    assert report.min_post_margin >= -1e-6
    assert report.t_star == 2.0


def test_screen_separates_lowpass_from_growing_time_constant():
    ens = _ensemble(pairs=16, box=(0.0, 0.0), grid=TimeGrid.from_horizon(10.0, 0.01))
    lowpass = fm_screen(lowpass_model(1.0), ens)
    assert lowpass.passed
    assert lowpass.rate == pytest.approx(0.1)
    growing = fm_screen(counterexample_a2_model(), ens)
    assert growing.increment_slope <= 1.0 + 1e-6
    assert not growing.passed

# ==========================================
# CERTIFICATES FROM DISSIPATION
# ==========================================

def test_dissipation_certificate_for_lowpass():
    cand = certificate_from_dissipation(1.0, PolynomialGain(coefficients=(0.0, 1.0)), 2.0, LAGS)
    assert cand.form == "max"
    assert gain_eval(cand.gamma, 1.0) == pytest.approx(2.0, rel=1e-9)
    report = falsify_fm(lowpass_model(1.0), cand, _ensemble(pairs=100, amplitude=2.0))
    assert report.passed


def test_memristor_output_lifting():
    params = MemristorParams()
    state = certificate_from_dissipation(params.a, PolynomialGain(coefficients=(0.0, 1.0)), 2.0, LAGS)
    out = memristor_output_candidate(state, params, 2.0)
    assert out.form == "sum"
    assert gain_eval(out.gamma, 1.0) == pytest.approx(1.5 + 2.0, rel=1e-9)

    ens = _ensemble(pairs=100, amplitude=2.0, box=(-2.0, 2.0), grid=TimeGrid.from_horizon(20.0, 0.02))
    assert falsify_fm(memristor_model(params, "state"), state, ens).passed
    assert falsify_fm(memristor_model(params, "voltage"), out, ens).passed


def test_output_lifting_needs_unit_weight_at_zero():
    state = FmCertificateCandidate(
        beta=ExpDecayKL(gain=LinearGain(slope=1.0), rate=1.0),
        gamma=LinearGain(slope=1.0),
        kernel=TabulatedKernel(lags=(0.0, 1.0), weights=(0.9, 0.05)),
    )
    with pytest.raises(DomainError):
        memristor_output_candidate(state, MemristorParams(), 2.0)
