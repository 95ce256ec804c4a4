"""Scenario files: JSON loading, schema validation, overrides, object construction."""
from __future__ import annotations

import copy
import json
from importlib import resources

import jsonschema
import numpy as np

from .bsde import Variant
from .control import Scenario
from .enlargement import ModelMalformation, tau_model_from_json
from .measure_change import ControlKernel
from .process_core import poisson_kernel


class ScenarioError(ValueError):
    """Malformed scenario file (bad JSON, schema violation, inconsistent values)."""


def schema():
    return json.loads(resources.files("enlargectrl").joinpath("schema/scenario.schema.json").read_text())


def shipped(relative):
    """Path of a scenario file shipped with the package, e.g. ``battery/s1_full.json``."""
    return resources.files("enlargectrl").joinpath("scenarios").joinpath(relative)


def load(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def validate(doc, source="<scenario>"):
    errors = sorted(jsonschema.Draft202012Validator(schema()).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.path) or "<root>"
        raise ScenarioError(f"{source}: field {where}: {e.message}")
    kind = doc["kind"]
    if kind in ("control", "compensator") and "tau_model" not in doc:
        raise ScenarioError(f"{source}: field tau_model: required for kind {kind!r}")
    if kind == "control":
        for key in ("control", "bsde"):
            if key not in doc:
                raise ScenarioError(f"{source}: field {key}: required for control scenarios")
    return doc


_RUN_KEYS = ("n_paths", "seed", "dt", "horizon", "rule", "quadrature_dt", "out_dir")


def apply_overrides(doc, overrides):
    """``key=value`` pairs; bare run keys (``dt``, ``seed``...) address the run section."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ScenarioError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        if len(parts) == 1 and parts[0] in _RUN_KEYS:
            parts = ["run", parts[0]]
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return doc


def _terminal(piece):
    poly = np.asarray(piece.get("poly", [0.0]), float)
    a = float(piece.get("abs", 0.0))

    def f(x):
        x = np.asarray(x, float)
        return np.polynomial.polynomial.polyval(x, poly) + a * np.abs(x)

    return f


def terminal_cost(spec):
    g0, g1 = _terminal(spec["h0"]), _terminal(spec["h1"])

    def g(x, h):
        x = np.asarray(x)
        h = np.asarray(h)
        return np.where(h == 0, g0(x), g1(x))

    return g


def build_kernel(proc):
    marks = proc.get("marks", [-1, 1])
    probs = proc.get("probs", [1.0 / len(marks)] * len(marks))
    if len(probs) != len(marks):
        raise ScenarioError("process: marks and probs have different lengths")
    bound = proc.get("bound", 8)
    x0 = proc.get("x0", 0)
    if abs(x0) > bound:
        raise ScenarioError("process: x0 outside the lattice")
    try:
        return poisson_kernel(proc["lambda"], marks, probs, bound)
    except ValueError as exc:
        raise ScenarioError(f"process: {exc}") from exc


def build_control(spec, marks):
    r_rows, l_rows, names = [], [], []
    for a in spec["actions"]:
        names.append(a["name"])
        r = a["r"]
        if isinstance(r, dict):
            extra = set(r) - {str(m) for m in marks}
            if extra:
                raise ScenarioError(f"control: action {a['name']!r} names unknown marks {sorted(extra)}")
            r_rows.append([float(r.get(str(m), 1.0)) for m in marks])
        else:
            r_rows.append([float(r)] * len(marks))
        l = a["l"]
        l_rows.append([l["h0"], l["h1"]] if isinstance(l, dict) else [l, l])
    try:
        return ControlKernel.from_tables(names, r_rows, l_rows, spec["M_r"], spec["M_l"])
    except ValueError as exc:
        raise ScenarioError(f"control: {exc}") from exc


def process_dict(proc, kernel):
    return {"lambda": float(proc["lambda"]), "marks": list(kernel.marks), "probs": list(map(float, kernel.probs)),
            "bound": kernel.bound, "x0": int(proc.get("x0", 0))}


def build_scenario(doc):
    """Scenario object for a control document (schema-validated)."""
    kernel = build_kernel(doc["process"])
    tau = build_tau(doc["tau_model"], kernel)
    control = build_control(doc["control"], kernel.marks)
    b = doc["bsde"]
    run = doc["run"]
    variant = Variant.FULL if b["variant"] == "FULL" else Variant.EQUIV
    return Scenario(name=doc["name"], kernel=kernel, tau_model=tau, control=control,
                    g=terminal_cost(b["terminal"]), horizon=float(run.get("horizon", 1.0)),
                    dt=float(run.get("dt", 1e-3)), n_paths=int(run.get("n_paths", 100_000)),
                    seed=int(run.get("seed", 0)), variant=variant, x0=int(doc["process"].get("x0", 0)),
                    beta=b.get("beta"), selector=b.get("selector", "argmin"),
                    process=process_dict(doc["process"], kernel))


def build_tau(spec, kernel):
    try:
        return tau_model_from_json(spec, mark_probs=kernel.probs)
    except ModelMalformation:
        raise
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"tau_model: {exc}") from exc
