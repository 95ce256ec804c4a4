"""Cost functionals, an independent dynamic-programming oracle, and the two verifiers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .bsde import BsdeProblem, Variant, solve_bsde, stop_solution
from .enlargement import CoxTime, enlarged_compensator
from .measure_change import (PolicyProcess, action_tables, doleans_L_batch, integrate_table,
                             simulate_batch_under_Pu)
from .process_core import n_cells_for, simulate_chunk

REL_TOL = 0.01
K_SE = 3.0


@dataclass
class Scenario:
    """Everything one control experiment needs."""

    name: str
    kernel: object
    tau_model: object
    control: object
    g: object
    horizon: float
    dt: float
    n_paths: int
    seed: int
    variant: Variant = Variant.FULL
    x0: int = 0
    beta: float | None = None
    selector: str = "argmin"
    process: dict = field(default_factory=dict)

    def __post_init__(self):
        self.variant = Variant(self.variant) if not isinstance(self.variant, Variant) else self.variant
        n_cells_for(self.horizon, self.dt)
        self.compensator = enlarged_compensator(self.kernel, self.tau_model, self.horizon, self.x0)
        if self.variant in (Variant.AUX, Variant.EQUIV) and self.control.r_table is not None:
            if np.any(self.control.r_table[0] != 1.0) or np.any(self.control.l_table[0] != 0.0):
                raise ValueError("random-horizon scenarios need action 0 to be the null action (r = 1, l = 0)")

    @property
    def random_horizon(self):
        return self.variant in (Variant.AUX, Variant.EQUIV)

    @property
    def bound(self):
        return self.kernel.bound

    def problem(self, variant=None, selector=None):
        return BsdeProblem(self.compensator, self.control, self.g, self.horizon,
                           self.variant if variant is None else variant, self.beta, self.x0,
                           self.selector if selector is None else selector)

    def with_(self, **kw):
        d = {k: getattr(self, k) for k in ("name", "kernel", "tau_model", "control", "g", "horizon", "dt",
                                           "n_paths", "seed", "variant", "x0", "beta", "selector", "process")}
        d.update(kw)
        return Scenario(**d)


@dataclass
class CostEstimate:
    direct_mean: float
    direct_se: float
    reweighted_mean: float
    reweighted_se: float
    default_prob: float
    default_prob_se: float

    @property
    def mean(self):
        return self.direct_mean

    @property
    def se(self):
        return self.direct_se

    @property
    def combined_se(self):
        return math.hypot(self.direct_se, self.reweighted_se)

    @property
    def agree(self):
        return abs(self.direct_mean - self.reweighted_mean) <= K_SE * self.combined_se + 1e-12

    def to_json(self):
        return {"direct": {"value": self.direct_mean, "se": self.direct_se, "estimator": "mc"},
                "reweighted": {"value": self.reweighted_mean, "se": self.reweighted_se, "estimator": "mc"},
                "default_prob_Pu": {"value": self.default_prob, "se": self.default_prob_se, "estimator": "mc"},
                "estimators_agree": self.agree, "tolerance": "3*combined_se"}


def _mean_se(x):
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.shape[0]))


def _x_before_tau(batch):
    marks = np.asarray(batch.marks)
    dx = np.where(batch.mark < batch.n_marks, marks[np.minimum(batch.mark, batch.n_marks - 1)], 0)
    before = batch.times < np.repeat(batch.tau, np.diff(batch.offsets))
    return batch.x0 + np.bincount(batch.jump_path, weights=dx * before, minlength=batch.n_paths).astype(np.int64)


def path_costs(batch, scenario, running, random_horizon):
    """int l dC (+ the terminal cost) per path; ``running`` is l * clock on the policy grid."""
    h_T = (batch.tau <= batch.horizon).astype(np.int64)
    x_end = _x_before_tau(batch) if random_horizon else batch.x_terminal()
    return integrate_table(batch, running, scenario.dt) + np.asarray(scenario.g(x_end, h_T), float)


def _running(scenario, policy, random_horizon):
    r_tab, l_tab = action_tables(policy, scenario.control)
    clock = scenario.kernel.table.sum(axis=-1)  # (n_x, 2)
    run = l_tab * clock[None]
    if random_horizon:
        run[:, :, 1] = 0.0
    return (r_tab, l_tab), run


def _estimate(scenario, policy, n_paths, seed, random_horizon, tag):
    # policies sharing a tag share random numbers (common random numbers across comparisons)
    policy.check_grid(scenario.horizon)
    tables, run = _running(scenario, policy, random_horizon)
    direct = simulate_batch_under_Pu(scenario.kernel, scenario.tau_model, policy, scenario.control,
                                     scenario.horizon, n_paths, seed, label=f"cost-direct-{tag}")
    d_cost = path_costs(direct, scenario, run, random_horizon)
    dflt = (direct.tau <= scenario.horizon).astype(float)

    def one(i, size):
        b = simulate_chunk(rng.generator(seed, f"cost-rw-{tag}", i), scenario.kernel, scenario.tau_model,
                           scenario.horizon, size, x0=scenario.x0)
        L = doleans_L_batch(b, policy, scenario.kernel, scenario.control, tables)
        return L * path_costs(b, scenario, run, random_horizon)

    w_cost = np.concatenate(rng.map_chunks(one, n_paths))
    dm, ds = _mean_se(d_cost)
    wm, ws = _mean_se(w_cost)
    pm, ps = _mean_se(dflt)
    return CostEstimate(dm, ds, wm, ws, pm, ps)


def cost_J(scenario, policy, n_paths=None, seed=None, tag="J"):
    """J(u) = E_u[int_0^T l dC + g(X_T, H_T)]: direct under P_u and reweighted by L^u under P."""
    n_paths = scenario.n_paths if n_paths is None else n_paths
    seed = scenario.seed if seed is None else seed
    return _estimate(scenario, policy, n_paths, seed, False, tag)


def cost_barJ(scenario, policy, n_paths=None, seed=None, tag="barJ", require_C_hat=True):
    """Random-horizon cost E_u[int_0^{T^tau} l dC + g(X_{T^tau}, H_T)] for policies in C-hat."""
    if require_C_hat and not policy.in_C_hat:
        raise ValueError("policy is not in C-hat (acts after T ^ tau)")
    n_paths = scenario.n_paths if n_paths is None else n_paths
    seed = scenario.seed if seed is None else seed
    return _estimate(scenario, policy, n_paths, seed, True, tag)


# -- dynamic programming oracle ----------------------------------------------------

MAX_DP_WORK = 5e7


@dataclass
class DpResult:
    value: float
    V0: np.ndarray


def dp_oracle(scenario, variant=None, full=False):
    """Bellman recursion on the dt-chain of the controlled lattice process.

    Built from the scenario's raw process parameters (lambda, marks, probs,
    bound) and default rate; from state x, action u: jump to x + m with
    probability lambda phi_m r dt (when x + m stays on the lattice), default
    with probability gamma dt, stay otherwise. Random-horizon problems stop at
    default and pay g(x, 1).
    """
    variant = scenario.variant if variant is None else Variant(variant)
    if not isinstance(scenario.tau_model, CoxTime):
        raise ValueError("the oracle handles Cox default times only")
    p = scenario.process
    lam, marks, probs, K = float(p["lambda"]), list(p["marks"]), list(p["probs"]), int(p["bound"])
    gamma = scenario.tau_model.gamma
    dt = scenario.dt
    n = int(round(scenario.horizon / dt))
    n_u = scenario.control.n_actions
    n_x = 2 * K + 1
    n_s = 2 * n_x
    if n_s * n_s * n_u * n > MAX_DP_WORK * 10 or n_s * n * n_u > MAX_DP_WORK:
        raise ValueError("grid too large for the dense oracle")
    xs = np.arange(-K, K + 1)
    random_horizon = variant in (Variant.AUX, Variant.EQUIV)

    def matrices(t):
        P = np.zeros((n_u, n_s, n_s))
        cost = np.zeros((n_u, n_s))
        for u in range(n_u):
            uu = np.full(n_x, u)
            rvals = scenario.control.r(np.full(n_x, t), xs, uu)
            for h in (0, 1):
                lv = scenario.control.l(np.full(n_x, t), xs, np.full(n_x, h), uu)
                for i in range(n_x):
                    s = h * n_x + i
                    out = 0.0
                    clock = 0.0
                    for m, (mk, ph) in enumerate(zip(marks, probs)):
                        j = i + mk
                        if 0 <= j < n_x:
                            prob = lam * ph * rvals[i, m] * dt
                            P[u, s, h * n_x + j] += prob
                            out += prob
                            clock += lam * ph
                    if h == 0:
                        P[u, s, n_x + i] += gamma * dt
                        out += gamma * dt
                    P[u, s, s] += 1.0 - out
                    cost[u, s] = lv[i] * clock * dt
        return P, cost

    V = np.empty(n_s)
    V[:n_x] = scenario.g(xs, np.zeros(n_x, np.int64))
    V[n_x:] = scenario.g(xs, np.ones(n_x, np.int64))
    absorbed = V[n_x:].copy()
    cache = None
    static = scenario.control.r_table is not None
    for k in range(n - 1, -1, -1):
        if cache is None or not static:
            cache = matrices(k * dt)
        P, cost = cache
        if random_horizon:
            P = P.copy()
            cost = cost.copy()
            cost[:, n_x:] = 0.0
            P[:, n_x:, :] = 0.0
            P[:, n_x + np.arange(n_x), n_x + np.arange(n_x)] = 1.0
        Q = cost + np.einsum("usj,j->us", P, V)
        V = Q.min(axis=0)
        if random_horizon:
            V[n_x:] = absorbed
    value = float(V[scenario.x0 + K])
    return DpResult(value, V.reshape(2, n_x).T) if full else value


# -- policies -----------------------------------------------------------------

def perturbed_policy(policy, n_actions, seed, i, frac=0.1, in_C_hat=False):
    """Flip the action on a random ``frac`` of grid nodes to a different action."""
    gen = rng.generator(seed, f"perturb-{i}")
    table = policy.table.copy()
    if in_C_hat:
        flat = table[:, :, 0].reshape(-1).copy()
    else:
        flat = table.reshape(-1).copy()
    idx = gen.choice(flat.shape[0], size=max(1, int(round(frac * flat.shape[0]))), replace=False)
    flat[idx] = (flat[idx] + gen.integers(1, n_actions, idx.shape[0])) % n_actions
    if in_C_hat:
        table[:, :, 0] = flat.reshape(table[:, :, 0].shape)
    else:
        table = flat.reshape(table.shape)
    return PolicyProcess(table, policy.dt, policy.bound, in_C_hat=in_C_hat, name=f"perturbed-{i}")


def random_policy(shape, n_actions, dt, bound, seed, i, post_only_from=None):
    """Random grid policy; with ``post_only_from`` keep its pre-default part and randomize only after default."""
    gen = rng.generator(seed, f"random-policy-{i}")
    table = gen.integers(0, n_actions, shape)
    if post_only_from is not None:
        table[:, :, 0] = post_only_from.table[:, :, 0]
        table[:, :, 1] = np.maximum(table[:, :, 1], 1 if n_actions > 1 else 0)
    return PolicyProcess(table, dt, bound, name=f"random-{i}")


# -- verification -------------------------------------------------------------

def _close(a, b, se=0.0):
    return abs(a - b) <= max(REL_TOL * max(1.0, abs(b)), K_SE * se)


@dataclass
class VerificationReport:
    scenario: str
    variant: str
    y0_bsde: float
    y0_oracle: float
    j_of_ustar: CostEstimate
    j_of_alternatives: list
    flags: dict
    dt: float
    extra: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.flags.values())

    def to_json(self):
        return {
            "scenario": self.scenario,
            "variant": self.variant,
            "y0_bsde": {"value": self.y0_bsde, "estimator": "deterministic", "tolerance": f"dt={self.dt:g}"},
            "y0_oracle": {"value": self.y0_oracle, "estimator": "deterministic",
                          "tolerance": "1% relative to max(1,|value|)"},
            "j_of_ustar": self.j_of_ustar.to_json(),
            "j_of_alternatives": [
                {"policy": name, "value": est.mean, "se": est.se, "estimator": "mc",
                 "tolerance": "J >= y0 - 3*se", "pass": bool(est.mean >= self.y0_bsde - K_SE * est.se)}
                for name, est in self.j_of_alternatives],
            "flags": dict(self.flags),
            "extra": self.extra,
            "pass": self.passed,
        }


def verify_fundamental_relation(scenario, n_perturbed=5):
    """Y0 = oracle (a), J(u*) = Y0 (b), and no perturbed policy beats Y0 (c)."""
    if scenario.variant is not Variant.FULL:
        raise ValueError("fundamental relation check needs the FULL variant")
    sol = solve_bsde(scenario.problem(), scenario.dt)
    oracle = dp_oracle(scenario)
    j_star = cost_J(scenario, sol.policy, tag="eval")
    alts = []
    for i in range(n_perturbed):
        pol = perturbed_policy(sol.policy, scenario.control.n_actions, scenario.seed, i)
        alts.append((pol.name, cost_J(scenario, pol, tag="eval")))
    a = abs(sol.y0 - oracle) / max(1.0, abs(oracle)) <= REL_TOL
    b = _close(j_star.mean, sol.y0, j_star.se)
    c = all(est.mean >= sol.y0 - K_SE * est.se for _, est in alts)
    flags = {"oracle_agreement": bool(a), "j_ustar_equals_y0": bool(b), "no_perturbation_beats_y0": bool(c),
             "estimator_consistency": bool(j_star.agree and all(e.agree for _, e in alts))}
    flags["fundamental_relation"] = bool(a and b and c)
    return VerificationReport(scenario.name, scenario.variant.value, sol.y0, oracle, j_star, alts, flags,
                              scenario.dt, {"solver": sol.diagnostics()}), sol


def verify_equivalence(scenario, n_c_policies=10):
    """Both random-horizon BSDEs agree (a), J-bar(u*) = Y0 (b), C-policies do not beat Y0 (c)."""
    if not scenario.tau_model.is_immersion:
        raise ValueError("the equivalence check requires immersion")
    equiv = solve_bsde(scenario.problem(Variant.EQUIV), scenario.dt)
    aux = solve_bsde(scenario.problem(Variant.AUX), scenario.dt)
    stopped = stop_solution(aux)
    oracle = dp_oracle(scenario, Variant.EQUIV)
    u_hat = equiv.policy.stopped()
    j_bar = cost_barJ(scenario, u_hat, tag="eval")
    alts = []
    half = n_c_policies // 2
    for i in range(n_c_policies):
        base = u_hat if i < half else None
        pol = random_policy(equiv.policy.table.shape, scenario.control.n_actions, scenario.dt, scenario.bound,
                            scenario.seed, i, post_only_from=base)
        alts.append((pol.name, cost_barJ(scenario, pol, tag="eval", require_C_hat=False)))
    n_theta = scenario.kernel.n_marks + 1
    theta_post = aux.theta[:, :, 1, :n_theta]
    a = abs(equiv.y0 - aux.y0) <= 1e-9 * max(1.0, abs(aux.y0))
    b = _close(j_bar.mean, equiv.y0, j_bar.se)
    c = all(est.mean >= equiv.y0 - K_SE * est.se for _, est in alts)
    d = abs(equiv.y0 - oracle) / max(1.0, abs(oracle)) <= REL_TOL
    stop_ok = stopped.stopped_drift <= 10 * scenario.dt and bool(np.all(theta_post == 0.0))
    flags = {"bsde_agreement": bool(a), "j_bar_equals_y0": bool(b), "no_C_policy_beats_y0": bool(c),
             "oracle_agreement": bool(d), "stopped_identity": bool(stop_ok),
             "estimator_consistency": bool(j_bar.agree)}
    flags["equivalence"] = bool(a and b and c and d)
    extra = {"y0_aux": {"value": aux.y0, "estimator": "deterministic", "tolerance": "1e-9 relative"},
             "stopped_drift": {"value": stopped.stopped_drift, "estimator": "deterministic",
                               "tolerance": f"10*dt={10 * scenario.dt:g}"},
             "theta_post_default_max": {"value": float(np.max(np.abs(theta_post))), "estimator": "deterministic",
                                        "tolerance": "exactly 0"},
             "j_C_min": {"value": min(e.mean for _, e in alts), "estimator": "mc", "tolerance": "y0 - 3*se"},
             "solver": equiv.diagnostics()}
    return VerificationReport(scenario.name, Variant.EQUIV.value, equiv.y0, oracle, j_bar, alts, flags,
                              scenario.dt, extra), equiv, aux, stopped


