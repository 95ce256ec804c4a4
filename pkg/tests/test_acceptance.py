"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""
import json
import math
import time

import numpy as np
import pytest
import sympy as sp

from enlargectrl import cli, config
from enlargectrl.bsde import Variant, grid_convergence, solve_bsde, stop_solution
from enlargectrl.control import K_SE, REL_TOL, cost_barJ, cost_J, dp_oracle, verify_equivalence, \
    verify_fundamental_relation
from enlargectrl.enlargement import CoxTime, enlarged_compensator, lambda_G, standard_battery
from enlargectrl.measure_change import PolicyProcess, check_unit_expectation, doleans_L_batch
from enlargectrl.process_core import martingale_test, poisson_kernel, simulate_batch

from conftest import shipped_doc, shipped_scenario


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def _battery(relative):
    doc = shipped_doc(relative)
    run = doc["run"]
    kernel = config.build_kernel(doc["process"])
    tau = config.build_tau(doc["tau_model"], kernel)
    horizon = run.get("horizon", 1.0)
    comp = enlarged_compensator(kernel, tau, horizon, doc["process"].get("x0", 0))
    t0 = time.perf_counter()
    rep = martingale_test(kernel, tau, standard_battery(kernel.marks, horizon), 100_000, run["seed"], horizon,
                          compensator=comp, quadrature_dt=0.01, rule="midpoint")
    return rep, time.perf_counter() - t0


def test_criterion_01_compensator_battery(report):
    parts, ok = [], True
    for rel in ("battery/s1_full.json", "battery/jacod.json"):
        rep, secs = _battery(rel)
        recs = rep.to_records()
        assert len(recs) == 10
        worst = max(abs(r["mean"]) / r["se"] if r["se"] > 0 else 0.0 for r in recs)
        ok &= rep.passed and secs <= 60
        parts.append(f"{rel.split('/')[1]}: max|z|={worst:.2f} in {secs:.1f}s")
    report(1, ok, "; ".join(parts))


def test_criterion_02_lambda_G_closed_form(report):
    s, t, tau = sp.symbols("s t tau", positive=True)
    g = sp.Rational(1, 2)
    A = sp.exp(-g * s)
    # Lambda^G_t = int_0^{t ^ tau} -dA_s / A_{s-}
    sym = sp.integrate(-sp.diff(A, s) / A, (s, 0, sp.Min(t, tau)))
    model = CoxTime(0.5)
    worst = 0.0
    for tau_v in (0.3, 0.77, math.inf):
        for t_v in np.linspace(0.0, 1.0, 20):
            want = float(sym.subs({t: t_v, tau: tau_v if math.isfinite(tau_v) else sp.oo}))
            got = lambda_G(model, t_v, tau_v, horizon=1.0)
            worst = max(worst, abs(got - want))
    report(2, worst <= 2 * np.finfo(float).eps, f"max abs error {worst:.2e} over 20 grid points x 3 tau values")


@pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
def test_criterion_03_unit_expectation(report, c):
    acts = [{"name": "a", "r": c, "l": 0.0}]
    sc = shipped_scenario("battery/s1_full.json", **{"control.actions": json.dumps(acts)})
    assert sc.process["lambda"] == 2.0 and sc.horizon == 1.0
    pol = PolicyProcess.constant(0, 1000, 1e-3, sc.bound)
    res = check_unit_expectation(sc.kernel, sc.tau_model, pol, sc.control, 100_000, 31, 1.0)
    report(3, res["pass"], f"r={c}: mean L={res['mean_L']:.5f} se={res['se']:.2e} E[L^2]={res['second_moment']:.3f}")


def test_criterion_04_measure_change(report, s1, s2):
    parts, ok = [], True
    for sc in (s1, s2):
        sol = solve_bsde(sc.problem(), sc.dt)
        est = cost_barJ(sc, sol.policy.stopped()) if sc.random_horizon else cost_J(sc, sol.policy)
        p = 1.0 - float(sc.tau_model.survival(sc.horizon))
        inv = abs(est.default_prob - p) <= K_SE * est.default_prob_se
        ok &= est.agree and inv
        gap = abs(est.direct_mean - est.reweighted_mean) / est.combined_se
        parts.append(f"{sc.name}: |direct-reweighted|={gap:.2f} combined se, P_u(default)={est.default_prob:.4f}"
                     f" vs {p:.4f}")
    report(4, ok, "; ".join(parts))


def test_criterion_05_bsde_vs_oracle(report, s1, s2):
    parts, ok = [], True
    for sc in (s1, s2):
        assert sc.dt == 1e-3
        y0 = solve_bsde(sc.problem(), sc.dt).y0
        dp = dp_oracle(sc)
        rel = abs(y0 - dp) / abs(dp)
        gc = grid_convergence(sc.problem())
        ok &= rel <= REL_TOL and gc["pass"]
        parts.append(f"{sc.name}: rel gap {rel:.1e}, C={gc['C']:.3f}, |dY0|={gc['fine_diff']:.2e} <= {gc['bound']:.2e}")
    report(5, ok, "; ".join(parts))


def test_criterion_06_fundamental_relation(report, s1):
    rep, _ = verify_fundamental_relation(s1)
    best = min(e.mean for _, e in rep.j_of_alternatives)
    ok = rep.flags["j_ustar_equals_y0"] and rep.flags["no_perturbation_beats_y0"]
    report(6, ok, f"Y0={rep.y0_bsde:.5f} J(u*)={rep.j_of_ustar.mean:.5f}+-{rep.j_of_ustar.se:.4f}"
                  f" best perturbed={best:.5f}")


def test_criterion_07_stopped_identity(report, s2):
    aux = solve_bsde(s2.problem(Variant.AUX), s2.dt)
    g1 = aux.problem.terminal()[1]
    drift = float(np.max(np.abs(aux.v[:, :, 1] - g1[None, :])))
    stopped = stop_solution(aux)
    theta_zero = bool(np.all(stopped.theta[:, :, 1, :] == 0.0))
    report(7, drift <= 10 * s2.dt and theta_zero, f"max|v(t,x,1)-g(x,1)|={drift:.1e} (limit {10 * s2.dt:.0e}),"
                                                   f" post-default Theta identically 0: {theta_zero}")


def test_criterion_08_equivalence(report, s2):
    rep, equiv, aux, stopped = verify_equivalence(s2)
    vals = {"Y0_equiv": equiv.y0, "Y0_stopped": stopped.y0, "J_bar": rep.j_of_ustar.mean}
    ok = rep.flags["equivalence"] and rep.flags["no_C_policy_beats_y0"]
    ok &= rep.flags["j_bar_equals_y0"] and rep.flags["bsde_agreement"]
    detail = ", ".join(f"{k}={v:.5f}" for k, v in vals.items())
    report(8, ok, f"{detail}, min over C-policies={rep.extra['j_C_min']['value']:.5f}")


def test_criterion_09_counterexample(report):
    from enlargectrl.enlargement import counterexample_demo

    doc = shipped_doc("battery/counterexample.json")
    lam = doc["process"]["lambda"]
    rep = counterexample_demo(lam, 10_000, doc["run"]["seed"])
    ok = rep.exact_fraction == 1.0 and rep.f_variance_min_bin > 0.5 / lam ** 2 and rep.passed
    report(9, ok, f"exact on {100 * rep.exact_fraction:.0f}% of paths, conditional variance"
                  f" {rep.f_variance_min_bin:.3f} > {0.5 / lam ** 2:.3f}")


def test_criterion_10_trivial_cases(report, s1):
    # r == 1 gives L == 1 on every path
    acts = [{"name": "a", "r": 1.0, "l": 0.2}, {"name": "b", "r": 1.0, "l": 0.7}]
    sc = shipped_scenario("battery/s1_full.json", **{"control.actions": json.dumps(acts)})
    pol = PolicyProcess(np.random.default_rng(0).integers(0, 2, (1000, 17, 2)).astype(np.int8), 1e-3, sc.bound)
    b = simulate_batch(sc.kernel, sc.tau_model, 1.0, 20_000, seed=3)
    L = doleans_L_batch(b, pol, sc.compensator, sc.control)
    l_one = bool(np.all(L == 1.0))
    # g == c, l == 0 gives Y0 == c
    term = json.dumps({"h0": {"poly": [1.75]}, "h1": {"poly": [1.75]}})
    zero_l = json.dumps([{"name": "a", "r": 1.0, "l": 0.0}, {"name": "b", "r": 2.0, "l": 0.0}])
    y = [solve_bsde(shipped_scenario(rel, **{"bsde.terminal": term, "control.actions": zero_l}).problem(), 1e-3).y0
         for rel in ("battery/s1_full.json", "battery/s2_equivalence.json")]
    y_c = all(v == 1.75 for v in y)
    # zero-intensity kernel gives empty paths
    e = simulate_batch(poisson_kernel(0.0), CoxTime(0.0), 1.0, 10_000, seed=4)
    empty = e.offsets[-1] == 0 and np.all(np.isinf(e.tau))
    report(10, l_one and y_c and empty, f"L==1: {l_one}; Y0==c: {y_c} ({y}); empty paths: {bool(empty)}")


def test_criterion_11_reproducibility(report, tmp_path):
    src = config.shipped("battery")
    runs = []
    for tag in ("a", "b"):
        code, _ = cli.run_battery(src, ["n_paths=20000"], out=tmp_path / tag, quiet=True)
        assert code == cli.EXIT_OK
        runs.append({p.relative_to(tmp_path / tag): p.read_bytes()
                     for p in sorted((tmp_path / tag).rglob("*")) if p.is_file()})
    same = runs[0] == runs[1]
    report(11, same and len(runs[0]) > 4, f"{len(runs[0])} artifacts byte-identical across two runs: {same}")
