import json
import math

import numpy as np
import pytest

from enlargectrl import config
from enlargectrl.bsde import Variant, solve_bsde
from enlargectrl.control import (MAX_DP_WORK, cost_barJ, cost_J, dp_oracle, perturbed_policy, random_policy,
                                 verify_equivalence, verify_fundamental_relation)
from enlargectrl.measure_change import PolicyProcess

from conftest import shipped_doc
from hjb_oracle import hjb_y0

NULL = {"name": "null", "r": 1.0, "l": 0.0}


def make(base="battery/s1_full.json", **over):
    doc = config.apply_overrides(shipped_doc(base), [f"{k}={json.dumps(v)}" for k, v in over.items()])
    return config.build_scenario(config.validate(doc)), doc


def const_policy(sc, u=0, in_C_hat=False):
    return PolicyProcess.constant(u, int(round(sc.horizon / sc.dt)), sc.dt, sc.bound, in_C_hat)


def within(est, target, k=3.0):
    return abs(est.mean - target) <= k * est.se + 1e-12


# -- costs ------------------------------------------------------------------------

def test_cost_of_uncontrolled_symmetric_walk():  # [TRIVIAL] E[X_T] = 0
    sc, _ = make(**{"control.actions": [NULL], "bsde.terminal": {"h0": {"poly": [0, 1]}, "h1": {"poly": [0, 1]}}})
    est = cost_J(sc, const_policy(sc), n_paths=50_000)
    assert within(est, 0.0)
    assert abs(est.reweighted_mean) <= 3 * est.reweighted_se


def test_cost_with_deterministic_running_cost():  # [DERIVED] J = c lam T + E[g(X_T)]
    sc, _ = make(**{"process.bound": 30, "control.actions": [{"name": "c", "r": 1.0, "l": 0.3}],
                    "bsde.terminal": {"h0": {"poly": [0, 1]}, "h1": {"poly": [0, 1]}}})
    est = cost_J(sc, const_policy(sc), n_paths=50_000)
    assert within(est, 0.3 * 2.0)


def test_barJ_limits():
    # [TRIVIAL] almost sure default with a constant post-default cost: J-bar = 0.75
    term = {"h0": {"poly": [0, 0, 1]}, "h1": {"poly": [0.75]}}
    sc, _ = make("battery/s2_equivalence.json", **{"tau_model.gamma": 25.0, "bsde.terminal": term})
    est = cost_barJ(sc, const_policy(sc, in_C_hat=True), n_paths=20_000)
    assert est.default_prob == 1.0
    assert est.direct_mean == pytest.approx(0.75, abs=1e-12)
    # [TRIVIAL] no default: J-bar equals J with g(., 0)
    sc0, _ = make("battery/s2_equivalence.json", **{"tau_model.gamma": 0.0})
    pol = const_policy(sc0, u=1, in_C_hat=True)
    a = cost_barJ(sc0, pol, n_paths=20_000, tag="same")
    b = cost_J(sc0, pol, n_paths=20_000, tag="same")
    assert a.direct_mean == b.direct_mean and a.reweighted_mean == b.reweighted_mean


def test_barJ_rejects_policies_outside_C_hat(s2):
    with pytest.raises(ValueError, match="C-hat"):
        cost_barJ(s2, const_policy(s2, u=1), n_paths=100)


def test_estimators_agree_on_shipped_scenarios(s1, s2):  # [DERIVED] direct vs L-reweighted
    for sc in (s1, s2):
        sol = solve_bsde(sc.problem(), sc.dt)
        pol = sol.policy.stopped() if sc.random_horizon else sol.policy
        est = (cost_barJ if sc.random_horizon else cost_J)(sc, pol, n_paths=50_000)
        assert est.agree
        assert abs(est.default_prob - (1 - math.exp(-sc.tau_model.gamma))) <= 3 * est.default_prob_se


# -- dp oracle ------------------------------------------------------------------

def test_dp_constant_cost():  # [TRIVIAL]
    sc, _ = make(**{"bsde.terminal": {"h0": {"poly": [2.5]}, "h1": {"poly": [2.5]}}})
    assert dp_oracle(sc) == pytest.approx(2.5, abs=1e-12)


def test_dp_single_action_is_expectation(s1):  # [TRIVIAL] no optimisation; checked against the HJB oracle
    act = {"name": "damp", "r": 0.5, "l": 0.4}
    sc, doc = make(**{"control.actions": [act]})
    assert abs(dp_oracle(sc) - hjb_y0(doc)) <= 10 * sc.dt


@pytest.mark.parametrize("which", ["s1", "s2"])
def test_dp_matches_bsde(which, s1, s2):  # [DERIVED] two discretisations of the same problem
    sc = s1 if which == "s1" else s2
    y0 = solve_bsde(sc.problem(), sc.dt).y0
    dp = dp_oracle(sc)
    assert abs(y0 - dp) / max(1.0, abs(dp)) <= 0.01
    # both are explicit Euler on the same chain, so they agree far below the 1% tolerance
    assert abs(y0 - dp) < 1e-10


def test_dp_rejects_oversized_grids(s1):
    big = s1.with_(dt=1e-6)
    assert 17 * 3 * 1_000_000 > MAX_DP_WORK
    with pytest.raises(ValueError, match="too large"):
        dp_oracle(big)


# -- policies -------------------------------------------------------------------

def test_perturbed_policy_flips_one_tenth(s1):
    base = solve_bsde(s1.problem(), 0.01).policy
    p = perturbed_policy(base, 3, seed=1, i=0)
    changed = np.mean(p.table != base.table)
    assert changed == pytest.approx(0.1, abs=1e-3)
    again = perturbed_policy(base, 3, seed=1, i=0)
    np.testing.assert_array_equal(p.table, again.table)
    post = random_policy(base.table.shape, 3, 0.01, base.bound, seed=1, i=0, post_only_from=base.stopped())
    assert np.all(post.table[:, :, 0] == base.table[:, :, 0]) and np.all(post.table[:, :, 1] >= 1)


# -- verifiers ------------------------------------------------------------------

def test_fundamental_relation_trivial_when_r_is_one():  # [TRIVIAL] J does not depend on u
    acts = [{"name": "a", "r": 1.0, "l": 0.1}, {"name": "b", "r": 1.0, "l": 0.3}]
    sc, _ = make(**{"control.actions": acts, "run.n_paths": 20_000})
    rep, _ = verify_fundamental_relation(sc)
    assert rep.passed


def test_fundamental_relation_s1(s1):  # [DERIVED]
    rep, sol = verify_fundamental_relation(s1)
    assert rep.passed, rep.flags
    assert all(est.mean > rep.y0_bsde for _, est in rep.j_of_alternatives)
    out = rep.to_json()
    assert out["y0_bsde"]["estimator"] == "deterministic" and out["j_of_ustar"]["direct"]["estimator"] == "mc"


def test_planted_fault_is_flagged():  # [DERIVED] harness sanity
    sc = config.build_scenario(shipped_doc("faults/planted_fault.json"))
    rep, _ = verify_fundamental_relation(sc)
    assert not rep.flags["no_perturbation_beats_y0"]
    assert not rep.flags["oracle_agreement"]
    assert not rep.flags["fundamental_relation"]


def test_equivalence_s2(s2):  # [DERIVED]
    rep, equiv, aux, stopped = verify_equivalence(s2)
    assert rep.passed, rep.flags
    assert equiv.y0 == pytest.approx(aux.y0, abs=1e-12)
    assert rep.extra["theta_post_default_max"]["value"] == 0.0


def test_equivalence_without_default_collapses_to_full():  # [TRIVIAL]
    sc, _ = make("battery/s2_equivalence.json", **{"tau_model.gamma": 0.0, "run.n_paths": 20_000})
    full = solve_bsde(sc.problem(Variant.FULL), sc.dt).y0
    rep, *_ = verify_equivalence(sc)
    assert rep.y0_bsde == full
    assert rep.passed


def test_equivalence_constant_cost():  # [TRIVIAL] l = 0, g = c: Y0 = J-bar = c for every policy
    acts = [NULL, {"name": "fast", "r": 2.0, "l": 0.0}]
    term = {"h0": {"poly": [1.25]}, "h1": {"poly": [1.25]}}
    sc, _ = make("battery/s2_equivalence.json", **{"control.actions": acts, "bsde.terminal": term,
                                                   "run.n_paths": 20_000})
    rep, *_ = verify_equivalence(sc, n_c_policies=4)
    assert rep.y0_bsde == 1.25
    assert rep.j_of_ustar.mean == pytest.approx(1.25, abs=1e-12)
    assert all(e.mean == pytest.approx(1.25, abs=1e-12) for _, e in rep.j_of_alternatives)


def test_random_horizon_needs_null_action():
    acts = [{"name": "damp", "r": 0.5, "l": 0.4}, NULL]
    with pytest.raises(ValueError, match="null action"):
        make("battery/s2_equivalence.json", **{"control.actions": acts})


def test_equivalence_refused_without_immersion(s2):
    from enlargectrl.enlargement import JacodDensity

    with pytest.raises(ValueError):
        verify_equivalence(s2.with_(tau_model=JacodDensity.exponential_mixture((1.5, 0.3), (0.5, 0.5))))
