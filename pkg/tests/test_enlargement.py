import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enlargectrl.enlargement import (A_FLOOR, CoxTime, EnlargedCompensator, JacodDensity, ModelMalformation,
                                     assemble_nu_Z_additive, azema_A, counterexample_demo, enlarged_compensator,
                                     jump_multiplier, lambda_G, nu_GX_immersion, nu_GX_jacod, qlc_atom_scan,
                                     standard_battery, tau_model_from_json)
from enlargectrl.process_core import PathState, martingale_test, poisson_kernel, simulate_batch

GAMMAS = (1.5, 0.3)


@pytest.fixture(scope="module")
def jacod():
    return JacodDensity.exponential_mixture(GAMMAS, (0.5, 0.5))


# -- azema_A ---------------------------------------------------------------------

def test_azema_at_zero_is_one(jacod):  # [TRIVIAL]
    assert azema_A(CoxTime(0.5), 0.0) == 1.0
    assert azema_A(jacod, 0.0) == pytest.approx(1.0, abs=1e-15)


def test_azema_cox_closed_form():  # [DERIVED] exp(-gamma t)
    assert azema_A(CoxTime(0.5), 2.0) == pytest.approx(math.exp(-1.0), rel=1e-15)


def test_azema_jacod_closed_form_and_mc(jacod):  # [DERIVED]
    # before any X-jump the conditional law of tau is the prior mixture of exponentials
    exact = 0.5 * (math.exp(-1.5) + math.exp(-0.3))
    assert azema_A(jacod, 1.0) == pytest.approx(exact, abs=1e-6)
    # after a first jump with mark m at time s: survival of Exp(gammas[m])
    for m, g in enumerate(GAMMAS):
        assert azema_A(jacod, 1.0, first_time=0.3, first_mark=m) == pytest.approx(math.exp(-g), abs=1e-6)
    # Monte Carlo oracle for P[tau > 1] under the full model
    b = simulate_batch(poisson_kernel(2.0), jacod, 1.0, 100_000, seed=21)
    s = (b.tau > 1.0).astype(float)
    assert abs(s.mean() - exact) <= 3 * s.std(ddof=1) / math.sqrt(s.size)


@settings(max_examples=50, deadline=None)
@given(gamma=st.floats(0.0, 5.0), ts=st.lists(st.floats(0.0, 5.0), min_size=2, max_size=10))
def test_azema_cox_monotone_in_unit_interval(gamma, ts):
    ts = np.sort(np.asarray(ts))
    a = azema_A(CoxTime(gamma), ts)
    assert np.all((a >= 0) & (a <= 1))
    assert np.all(np.diff(a) <= 0)


def test_azema_rejects_times_outside_horizon():
    with pytest.raises(ValueError):
        azema_A(CoxTime(0.5), 2.0, horizon=1.0)


# -- lambda_G --------------------------------------------------------------------

def test_lambda_G_examples():
    cox = CoxTime(0.5)
    assert lambda_G(cox, 0.0, 2.0) == 0.0  # [TRIVIAL]
    assert lambda_G(cox, 3.0, 2.0) == 1.0  # [DERIVED] gamma (t ^ tau)
    assert lambda_G(cox, 4.0, math.inf) == 2.0


@settings(max_examples=100, deadline=None)
@given(gamma=st.floats(0.0, 10.0), t=st.floats(0.0, 2.0), tau=st.floats(1e-6, 5.0))
def test_lambda_G_cox_is_gamma_t_min_tau(gamma, t, tau):
    assert lambda_G(CoxTime(gamma), t, tau) == pytest.approx(gamma * min(t, tau), rel=1e-14, abs=1e-300)


def test_lambda_G_jacod_closed_form(jacod):  # [DERIVED]
    # hazard of the prior mixture up to the first jump, then the mark's exponential rate
    t, s, m = 0.9, 0.4, 1
    prior = -math.log(0.5 * (math.exp(-1.5 * s) + math.exp(-0.3 * s)))
    expect = prior + GAMMAS[m] * (t - s)
    assert lambda_G(jacod, t, math.inf, first_time=s, first_mark=m) == pytest.approx(expect, abs=1e-6)
    # flat after tau
    assert lambda_G(jacod, t, 0.5, first_time=s, first_mark=m) == pytest.approx(prior + GAMMAS[m] * 0.1, abs=1e-6)


def test_lambda_G_compensates_H():  # [DERIVED] X = 0: E[H_T] = E[Lambda^G_T]
    cox = CoxTime(0.5)
    b = simulate_batch(poisson_kernel(0.0), cox, 1.0, 100_000, seed=22)
    diff = (b.tau <= 1.0) - lambda_G(cox, 1.0, b.tau)
    assert abs(diff.mean()) <= 3 * diff.std(ddof=1) / math.sqrt(diff.size)


def test_model_malformation_on_underflow():
    with pytest.raises(ModelMalformation):
        CoxTime(30.0).check_horizon(1.0)
    with pytest.raises(ModelMalformation):
        enlarged_compensator(poisson_kernel(1.0), CoxTime(30.0), 1.0)
    assert math.exp(-27.0) > A_FLOOR  # the floor is below any shipped model


# -- branches and assembly -------------------------------------------------------

def _state(n=5, **kw):
    return PathState.single(np.linspace(0.05, 0.95, n), **kw)


def test_no_default_gives_pure_x_compensator():  # [TRIVIAL]
    k = poisson_kernel(2.0)
    comp = enlarged_compensator(k, CoxTime(0.0), 1.0)
    lam = comp.intensity(_state())
    np.testing.assert_array_equal(lam[:, -1], 0.0)
    np.testing.assert_array_equal(lam, k.intensity(_state()))


def test_immersion_branches_are_identity():  # [TRIVIAL] and [REFERENCE]: phi^{G,X} = phi^{F,X}
    k = poisson_kernel(2.0)
    pre, post = nu_GX_immersion(k, CoxTime(0.5))
    assert pre is k and post is k
    comp = assemble_nu_Z_additive((pre, post), CoxTime(0.5))
    for h in (0, 1):
        lam = comp.intensity(_state(h=h, tau=0.01))
        np.testing.assert_allclose(lam[:, :-1].sum(axis=1), 2.0)
    assert np.all(comp.intensity(_state(h=0))[:, -1] == 0.5)
    assert np.all(comp.intensity(_state(h=1, tau=0.01))[:, -1] == 0.0)


def test_immersion_refused_for_moving_density(jacod):
    with pytest.raises(ValueError, match="immersion"):
        nu_GX_immersion(poisson_kernel(2.0), jacod)


def test_independent_density_has_unit_multipliers():  # [TRIVIAL] W' = 0, U = 0
    model = JacodDensity.exponential_mixture((0.7, 0.7), (0.5, 0.5))
    assert model.is_immersion
    k = poisson_kernel(2.0)
    pre, post = nu_GX_jacod(k, model)
    s = _state(h=1, tau=0.3)
    np.testing.assert_allclose(pre.intensity(s), k.intensity(s), rtol=1e-12)
    np.testing.assert_allclose(post.intensity(s), k.intensity(s), rtol=1e-12)


def test_zero_over_zero_convention():  # [TRIVIAL] p_- = 0 gives 1 + U = 1
    assert jump_multiplier(0.0, 0.0) == 1.0
    assert jump_multiplier(0.0, 3.0) == 1.0
    assert jump_multiplier(2.0, 1.0) == 0.5


def test_jacod_multipliers_closed_form(jacod):  # [DERIVED]
    t = np.array([0.5])
    s = PathState.single(t, tau=0.2)
    s0 = 0.5 * (math.exp(-0.75) + math.exp(-0.15))
    np.testing.assert_allclose(jacod.pre_multiplier(s)[0], [math.exp(-0.75) / s0, math.exp(-0.15) / s0], rtol=1e-5)
    f0 = 0.5 * (1.5 * math.exp(-0.3) + 0.3 * math.exp(-0.06))
    np.testing.assert_allclose(jacod.post_multiplier(s)[0], [1.5 * math.exp(-0.3) / f0, 0.3 * math.exp(-0.06) / f0],
                               rtol=1e-5)
    # martingale mix: sum over marks of probs * multiplier is 1 after tau
    assert float(jacod.post_multiplier(s)[0] @ jacod.probs) == pytest.approx(1.0, abs=1e-9)


def test_wrong_compensator_fails_jacod_battery(jacod):  # [DERIVED] negative control
    k = poisson_kernel(2.0)
    wrong = EnlargedCompensator(k, k, jacod.default_rate)
    rep = martingale_test(k, jacod, standard_battery(k.marks, 1.0), 20_000, seed=23, compensator=wrong,
                          quadrature_dt=0.05, rule="midpoint")
    assert not rep.passed
    assert not rep["mark_value_post_tau_early"].passed


def test_density_martingale_and_validation(jacod):
    assert jacod.check_density_martingale(poisson_kernel(2.0), 1.0, 20_000, seed=24)["pass"]
    u = np.linspace(0, 4, 5)
    with pytest.raises(ValueError, match="mass"):
        JacodDensity(u, np.full(5, 0.5), 0.0, np.ones((3, 5)), np.ones(3), (0.5, 0.5))
    f = 0.5 * np.array([np.exp(-u), np.exp(-u)])
    good = JacodDensity.from_regime_densities(u, f, 1 - np.sum(0.5 * (f[:, 1:] + f[:, :-1]), axis=1), (0.5, 0.5))
    bad_p = good.p.copy()
    bad_p[1] *= 1.1
    with pytest.raises(ValueError):
        JacodDensity(u, good.eta, good.eta_inf, bad_p, good.p_inf, (0.5, 0.5))
    with pytest.raises(ValueError, match="mark law"):
        nu_GX_jacod(poisson_kernel(2.0, probs=(0.2, 0.8)), jacod)


def test_json_round_trip(jacod):
    again = tau_model_from_json(jacod.to_json())
    np.testing.assert_array_equal(again.p, jacod.p)
    assert tau_model_from_json({"type": "cox", "gamma": 0.25}).gamma == 0.25
    with pytest.raises(ValueError):
        tau_model_from_json({"type": "weibull"})


# -- quasi-left continuity -------------------------------------------------------

def test_qlc_scan_examples(jacod):
    assert qlc_atom_scan(lambda t: 2.0 * t + np.sin(t), 0.01) == []  # [TRIVIAL]
    planted = qlc_atom_scan(lambda t: 0.5 * t + (t >= 1.0), 0.01, horizon=2.0)  # [TRIVIAL]
    assert planted == [(1.0, 1.0)]
    assert qlc_atom_scan(enlarged_compensator(poisson_kernel(2.0), CoxTime(0.5), 1.0), 0.001) == []
    assert qlc_atom_scan(enlarged_compensator(poisson_kernel(2.0), jacod, 1.0), 0.001) == []


def test_counterexample():
    rep = counterexample_demo(1.0, 10_000, seed=25)
    assert rep.exact_fraction == 1.0 and rep.max_abs_error == 0.0  # [REFERENCE] 2 tau - tau1 = tau2
    # [DERIVED] the F-variance of tau2 - tau1 is 1/lambda^2; sample-variance se ~ sqrt(8/n)
    assert abs(rep.f_variance - 1.0) <= 3 * math.sqrt(8 / 10_000)
    assert rep.flags == ["G-predictable jump detected", "F-totally-inaccessible retained"]
    assert rep.stopped_atoms == []  # [REFERENCE] the stopped process stays quasi-left continuous
    assert rep.passed
    with pytest.raises(ValueError):
        counterexample_demo(0.0, 10, seed=0)


@pytest.mark.parametrize("lam", [0.5, 3.0])
def test_counterexample_other_rates(lam):
    rep = counterexample_demo(lam, 10_000, seed=26)
    assert rep.passed
    assert rep.f_variance_min_bin > 0.5 / lam**2
