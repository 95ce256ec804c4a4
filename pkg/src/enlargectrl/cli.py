"""Command line entry point: run one scenario file, or every file in a directory."""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import config
from .bsde import CflError, Variant, grid_convergence, martingale_property, solve_bsde
from .control import (K_SE, cost_barJ, cost_J, verify_equivalence, verify_fundamental_relation)
from .enlargement import (ModelMalformation, check_first_mark_law, counterexample_demo, enlarged_compensator,
                          qlc_atom_scan, standard_battery)
from .process_core import martingale_test

EXIT_OK, EXIT_FAILED, EXIT_SCENARIO, EXIT_MODEL = 0, 1, 2, 3

DEFAULT_CHECKS = {
    "control": {Variant.FULL: ["fundamental"], Variant.EQUIV: ["equivalence"]},
    "compensator": ["compensator", "qlc"],
}

SUMMARY_COLUMNS = ["scenario", "y0_bsde", "y0_oracle", "j_mc", "se", "flags", "status"]


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Variant):
        return o.value
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_jsonable)
    Path(path).write_text(text + "\n")


# -- the individual checks ---------------------------------------------------

def _check_compensator(kernel, tau, comp, run, seed, n_paths, horizon):
    rep = martingale_test(kernel, tau, standard_battery(kernel.marks, horizon), n_paths, seed, horizon,
                          compensator=comp, quadrature_dt=run.get("quadrature_dt", 0.01),
                          rule=run.get("rule", "midpoint"))
    return {"battery": rep.to_records(), "n_paths": n_paths, "pass": rep.passed,
            "estimator": "mc", "tolerance": f"{K_SE:g}*se"}


def _check_qlc(comp, dt, horizon):
    atoms = qlc_atom_scan(comp, dt, horizon)
    return {"atoms": [list(a) for a in atoms], "grid_dt": dt, "pass": not atoms,
            "estimator": "deterministic", "tolerance": "atom mass 1e-3"}


def _check_density(kernel, tau, n_paths, seed, horizon, x0):
    if tau.is_immersion:
        return {"pass": True, "estimator": "deterministic", "tolerance": "exact", "note": "immersion: p = 1"}
    mart = tau.check_density_martingale(kernel, horizon, n_paths, seed)
    check_first_mark_law(kernel, tau, x0)
    return {"density_martingale": mart, "first_mark_law": True, "pass": mart["pass"],
            "estimator": "mc", "tolerance": f"{K_SE:g}*se per u-node"}


def _measure_change(scenario, policy):
    if scenario.random_horizon:
        est = cost_barJ(scenario, policy, tag="eval")
    else:
        est = cost_J(scenario, policy, tag="eval")
    p_expected = 1.0 - float(scenario.tau_model.survival(scenario.horizon))
    invariant = abs(est.default_prob - p_expected) <= K_SE * est.default_prob_se + 1e-12
    return {"cost": est.to_json(),
            "default_prob_P": {"value": p_expected, "estimator": "deterministic", "tolerance": "exact"},
            "default_prob_invariant": bool(invariant), "pass": bool(est.agree and invariant),
            "estimator": "mc", "tolerance": f"{K_SE:g}*se"}


def _unit_expectation(scenario, policy, n_paths, seed):
    from .measure_change import check_unit_expectation

    return check_unit_expectation(scenario.kernel, scenario.tau_model, policy, scenario.control,
                                  max(n_paths, 10_000), seed, scenario.horizon)


# -- kinds ---------------------------------------------------------------------

def _run_control(doc, out_dir):
    scenario = config.build_scenario(doc)
    checks = doc.get("checks") or DEFAULT_CHECKS["control"][scenario.variant]
    run, bsde_doc = doc["run"], doc["bsde"]
    sol = solve_bsde(scenario.problem(), scenario.dt)
    sol.to_csv(out_dir / "value_grid.csv")
    policy = sol.policy.stopped() if scenario.random_horizon else sol.policy
    policy.to_csv(out_dir / "policy.csv")

    results, summary = {}, {"y0_bsde": sol.y0}
    for name in checks:
        if name == "fundamental":
            rep, _ = verify_fundamental_relation(scenario, int(bsde_doc.get("n_perturbed", 5)))
        elif name == "equivalence":
            rep, *_ = verify_equivalence(scenario, int(bsde_doc.get("n_c_policies", 10)))
        if name in ("fundamental", "equivalence"):
            results[name] = rep.to_json()
            summary.update(y0_oracle=rep.y0_oracle, j_mc=rep.j_of_ustar.mean, se=rep.j_of_ustar.se)
        elif name == "measure_change":
            results[name] = _measure_change(scenario, policy)
        elif name == "unit_expectation":
            results[name] = _unit_expectation(scenario, policy, scenario.n_paths, scenario.seed)
        elif name == "martingale_property":
            if scenario.random_horizon:
                raise config.ScenarioError("martingale_property applies to FULL scenarios only")
            mp = martingale_property(sol, scenario.kernel, scenario.tau_model, scenario.n_paths, scenario.seed)
            results[name] = {**mp, "estimator": "mc", "tolerance": f"{K_SE:g}*se"}
        elif name == "grid_convergence":
            results[name] = grid_convergence(scenario.problem())
        elif name == "compensator":
            results[name] = _check_compensator(scenario.kernel, scenario.tau_model, scenario.compensator, run,
                                               scenario.seed, scenario.n_paths, scenario.horizon)
        elif name == "qlc":
            results[name] = _check_qlc(scenario.compensator, scenario.dt, scenario.horizon)
        elif name == "density":
            results[name] = _check_density(scenario.kernel, scenario.tau_model, scenario.n_paths, scenario.seed,
                                           scenario.horizon, scenario.x0)
        else:
            raise config.ScenarioError(f"check {name!r} does not apply to control scenarios")
    extra = {"solver": sol.diagnostics()}
    return results, summary, extra


def _run_compensator(doc, out_dir):
    proc, run = doc["process"], doc["run"]
    kernel = config.build_kernel(proc)
    tau = config.build_tau(doc["tau_model"], kernel)
    horizon = float(run.get("horizon", 1.0))
    x0 = int(proc.get("x0", 0))
    comp = enlarged_compensator(kernel, tau, horizon, x0)
    n_paths, seed, dt = int(run.get("n_paths", 100_000)), int(run.get("seed", 0)), float(run.get("dt", 0.01))
    results = {}
    for name in doc.get("checks") or DEFAULT_CHECKS["compensator"]:
        if name == "compensator":
            results[name] = _check_compensator(kernel, tau, comp, run, seed, n_paths, horizon)
        elif name == "qlc":
            results[name] = _check_qlc(comp, dt, horizon)
        elif name == "density":
            results[name] = _check_density(kernel, tau, n_paths, seed, horizon, x0)
        else:
            raise config.ScenarioError(f"check {name!r} does not apply to compensator scenarios")
    return results, {}, {"tau_model": tau.to_json()}


def _run_counterexample(doc, out_dir):
    run = doc["run"]
    rep = counterexample_demo(float(doc["process"]["lambda"]), int(run.get("n_paths", 10_000)),
                              int(run.get("seed", 0)))
    rec = rep.to_json()
    rec.update(estimator="mc", tolerance="exact prediction on every path; variance > 0.5/lambda^2")
    return {"counterexample": rec}, {}, {}


RUNNERS = {"control": _run_control, "compensator": _run_compensator, "counterexample": _run_counterexample}


# -- orchestration -------------------------------------------------------------

def prepare(path, overrides=(), seed=None, paths=None, dt=None):
    doc = config.load(path)
    extra = []
    if seed is not None:
        extra.append(f"seed={int(seed)}")
    if paths is not None:
        extra.append(f"n_paths={int(paths)}")
    if dt is not None:
        extra.append(f"dt={float(dt)!r}")
    doc.setdefault("run", {})
    doc = config.apply_overrides(doc, list(extra) + list(overrides or ()))
    return config.validate(doc, str(path))


def run_scenario(path, overrides=(), out=None, seed=None, paths=None, dt=None, quiet=False):
    """Run one scenario file. Returns ``(exit_code, result)``; artifacts go under ``out``."""
    say = (lambda *a: None) if quiet else (lambda *a: print(*a))
    name = Path(path).stem
    try:
        doc = prepare(path, overrides, seed, paths, dt)
        name = doc["name"]
        out_dir = Path(out if out is not None else doc["run"].get("out_dir", os.path.join("out", name)))
        out_dir.mkdir(parents=True, exist_ok=True)
        results, summary, extra = RUNNERS[doc["kind"]](doc, out_dir)
    except ModelMalformation as exc:
        print(f"{name}: model malformation: {exc}", file=sys.stderr)
        return EXIT_MODEL, {"scenario": name, "status": EXIT_MODEL, "error": str(exc)}
    except CflError as exc:
        print(f"{name}: {exc}", file=sys.stderr)
        return EXIT_SCENARIO, {"scenario": name, "status": EXIT_SCENARIO, "error": str(exc)}
    except (config.ScenarioError, ValueError, KeyError, TypeError) as exc:
        print(f"{name}: scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO, {"scenario": name, "status": EXIT_SCENARIO, "error": str(exc)}

    flags = {k: bool(v["pass"]) for k, v in results.items()}
    passed = all(flags.values())
    report = {"scenario": name, "kind": doc["kind"], "run": doc["run"], "checks": results, "flags": flags,
              "pass": passed, **extra}
    write_json(out_dir / "report.json", report)
    for k in results:
        say(f"{name}: {k}: {'PASS' if flags[k] else 'FAIL'}")
    code = EXIT_OK if passed else EXIT_FAILED
    return code, {"scenario": name, "status": code, "flags": flags, **summary}


def _fmt(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return repr(float(v))


def run_battery(directory, overrides=(), out=None, seed=None, paths=None, dt=None, quiet=False):
    """Run every ``*.json`` in ``directory`` (sorted) and write ``summary.csv``."""
    directory = Path(directory)
    out_root = Path(out) if out is not None else Path("out") / directory.name
    out_root.mkdir(parents=True, exist_ok=True)
    rows, codes = [], []
    for f in sorted(directory.glob("*.json")):
        code, res = run_scenario(f, overrides, out_root / f.stem, seed, paths, dt, quiet)
        codes.append(code)
        flags = res.get("flags", {})
        rows.append([res["scenario"], _fmt(res.get("y0_bsde")), _fmt(res.get("y0_oracle")), _fmt(res.get("j_mc")),
                     _fmt(res.get("se")), ";".join(f"{k}={int(v)}" for k, v in flags.items()), code])
    with open(out_root / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(rows)
    failed = [c for c in codes if c != EXIT_OK]
    return (max(failed) if failed else EXIT_OK), rows


def build_parser():
    p = argparse.ArgumentParser(prog="enlargectrl",
                                description="Run a scenario file (or a directory of them) and write artifacts.")
    p.add_argument("--scenario", required=True, help="scenario JSON file, or a directory for a battery run")
    p.add_argument("--out", help="output directory (default: run.out_dir or out/<name>)")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--paths", type=int, help="Monte Carlo paths")
    p.add_argument("--dt", type=float, help="time step")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a scenario field; bare run keys (dt, seed, n_paths...) address the run section")
    p.add_argument("--quiet", action="store_true", help="no per-check lines on stdout")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    kw = dict(overrides=args.override, out=args.out, seed=args.seed, paths=args.paths, dt=args.dt, quiet=args.quiet)
    if Path(args.scenario).is_dir():
        code, _ = run_battery(args.scenario, **kw)
    else:
        code, _ = run_scenario(args.scenario, **kw)
    return code


if __name__ == "__main__":
    sys.exit(main())
