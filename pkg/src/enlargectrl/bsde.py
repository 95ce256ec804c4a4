"""BSDEs driven by the jump measure of Z = (X, H), reduced to a Markov grid.

With time-homogeneous lattice kernels and Markov costs, Y_t = v(t, X_t, H_t)
and Theta is the first difference of v across each mark. The BSDE becomes a
finite ODE system solved by explicit backward Euler.

Variants differ in where the control terms act:

======== ======================== ============================ =====================
variant  running cost            jump-sensitivity term          terminal value
======== ======================== ============================ =====================
FULL     l on [0, T]              on [0, T]                    g(X_T, H_T)
AUX      l on [0, T ^ tau]        on [0, T ^ tau]              g(X_{T^tau}, H_{T^tau})
EQUIV    l on [0, T ^ tau]        on [0, T]                    g(X_{T^tau}, H_{T^tau})
======== ======================== ============================ =====================

For AUX and EQUIV the post-default value depends on X at default, so the
post-default layer is carried as ``w[k, x_now, x_default]``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .measure_change import PolicyProcess, cell_of, integrate_table, rate_table
from .process_core import PathState, lattice, n_cells_for

CFL_LIMIT = 0.5


class Variant(str, enum.Enum):
    FULL = "FULL_HORIZON"
    AUX = "AUXILIARY"
    EQUIV = "EQUIVALENCE"
    STOPPED = "STOPPED"


class CflError(ValueError):
    pass


def _variant(v):
    if isinstance(v, Variant):
        return v
    for item in Variant:
        if v in (item.name, item.value):
            return item
    raise ValueError(f"unknown variant {v!r}")


@dataclass
class BsdeProblem:
    compensator: object
    control: object
    g: object
    horizon: float
    variant: Variant = Variant.FULL
    beta: float | None = None
    x0: int = 0
    selector: str = "argmin"

    def __post_init__(self):
        self.variant = _variant(self.variant)
        if self.selector not in ("argmin", "argmax"):
            raise ValueError("selector must be argmin or argmax")
        if self.variant is Variant.STOPPED:
            raise ValueError("STOPPED solutions come from stop_solution(AUXILIARY solution)")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        tab = rate_table(self.compensator)
        if tab is None:
            raise ValueError("compensator is not Markov on the (x, h) lattice: the grid solver needs "
                             "time-homogeneous tabulated X-intensities (immersion models only)")
        self.q = np.asarray(tab, float)  # (n_x, 2, n_m)
        self.bound = (self.q.shape[0] - 1) // 2
        self.xs = lattice(self.bound)
        self.marks = np.asarray(self.compensator.marks, np.int64)
        self.gamma = self._default_rates()
        L = self.L
        if self.beta is None:
            self.beta = L * L + 1.0
        if not self.beta > L * L:
            raise ValueError(f"beta = {self.beta} must exceed L^2 = {L * L}")

    def _default_rates(self):
        n = self.xs.shape[0]
        rates = []
        for t in (0.0, 0.5 * self.horizon, self.horizon):
            st = PathState(np.full(n, t), self.xs.copy(), np.zeros(n, np.int64), np.zeros(n, np.int64),
                           np.full(n, -1), np.full(n, math.inf), np.zeros(n, np.int64), np.zeros(n, np.int64))
            rates.append(np.asarray(self.compensator.intensity(st)[:, -1], float))
        if np.max(np.abs(np.asarray(rates) - rates[0])) > 1e-12:
            raise ValueError("default intensity varies in time; the grid solver needs a constant one")
        return rates[0]

    @property
    def L(self):
        ctl = self.control
        if ctl.r_table is not None:
            return float(np.max(np.abs(ctl.r_table - 1.0)))
        times = np.linspace(0.0, self.horizon, 11)
        return ctl.L_sup(times, self.xs)

    def terminal(self):
        h0 = np.asarray(self.g(self.xs, np.zeros_like(self.xs)), float)
        h1 = np.asarray(self.g(self.xs, np.ones_like(self.xs)), float)
        return np.broadcast_to(h0, self.xs.shape).copy(), np.broadcast_to(h1, self.xs.shape).copy()


@dataclass
class BsdeSolution:
    """Value grid ``v[k, ix, h]`` at ``times[k]``, jumps ``theta[k, ix, h, mark]``, selector policy."""

    v: np.ndarray
    theta: np.ndarray
    y0: float
    policy: PolicyProcess
    times: np.ndarray
    dt: float
    variant: Variant
    xs: np.ndarray
    generator: np.ndarray
    cfl: float
    beta: float
    problem: BsdeProblem = field(repr=False)
    layer: np.ndarray | None = field(default=None, repr=False)
    stopped_drift: float | None = None

    @property
    def bound(self):
        return (self.xs.shape[0] - 1) // 2

    def value_at(self, k, x, h, x_default=None):
        """v on grid time k; post-default AUX/EQUIV values read the layer at X_tau."""
        ix = np.asarray(x) + self.bound
        h = np.asarray(h)
        out = self.v[k, ix, h]
        if self.layer is not None and x_default is not None:
            post = h == 1
            out = np.where(post, self.layer[k, ix, np.asarray(x_default) + self.bound], out)
        return out

    def to_csv(self, path):
        import csv

        n = self.policy.n_cells
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "h", "v", "u_star"])
            for k, t in enumerate(self.times):
                tt = f"{t:.10g}"
                for i, x in enumerate(self.xs):
                    for h in (0, 1):
                        u = "" if k == n else int(self.policy.table[k, i, h])
                        w.writerow([tt, int(x), h, f"{self.v[k, i, h]:.12e}", u])

    def diagnostics(self):
        return {"y0": self.y0, "dt": self.dt, "cfl": self.cfl, "beta": self.beta, "variant": self.variant.value}


def _neighbours(xs, marks):
    n_x = xs.shape[0]
    bound = (n_x - 1) // 2
    nb = np.arange(n_x)[:, None] + marks[None, :]
    ok = np.abs(xs[:, None] + marks[None, :]) <= bound
    return np.where(ok, nb, np.arange(n_x)[:, None]), ok


def action_values(l, theta, r, q, a_l=1.0, a_r=1.0):
    """Per-action Hamiltonian in rate form: a_l * l * clock + a_r * sum_m theta_m (r_m - 1) q_m.

    Shapes: l (..., n_u), theta (..., n_m), r (..., n_u, n_m), q (..., n_m).
    """
    clock = q.sum(axis=-1)
    sens = np.einsum("...m,...um->...u", theta * q, r - 1.0)
    return a_l * l * clock[..., None] + a_r * sens


def hamiltonian_f(t, x, theta_slice, control, mark_law, variant=Variant.FULL, h=0):
    """Exact minimum over the finite action set, first-index tie-breaking.

    Returns ``(f, u_index)`` per unit of clock: f = min_u a_l l + a_r sum theta (r - 1) phi.
    """
    variant = _variant(variant)
    theta = np.asarray(theta_slice, float)
    phi = np.asarray(mark_law, float)
    a_l, a_r = _weights(variant, h)
    u = np.arange(control.n_actions)
    tt = np.full(u.shape, float(t))
    xx = np.full(u.shape, x)
    r = control.r(tt, xx, u)
    l = control.l(tt, xx, np.full(u.shape, h), u)
    vals = a_l * l + a_r * (r - 1.0) @ (theta * phi)
    k = int(np.argmin(vals))
    return float(vals[k]), k


def _weights(variant, h):
    if variant is Variant.FULL:
        return 1.0, 1.0
    if variant is Variant.AUX:
        return (1.0, 1.0) if h == 0 else (0.0, 0.0)
    if variant is Variant.EQUIV:
        return (1.0, 1.0) if h == 0 else (0.0, 1.0)
    raise ValueError(f"no generator for {variant}")


def cfl_number(problem, dt, r_grid):
    q = problem.q  # (n_x, 2, n_m)
    tot = np.einsum("kxum,xm->kxu", r_grid, q[:, 0, :]).max(initial=0.0) + problem.gamma.max(initial=0.0)
    tot1 = np.einsum("kxum,xm->kxu", r_grid, q[:, 1, :]).max(initial=0.0)
    return max(tot, tot1) * dt


def solve_bsde(problem: BsdeProblem, dt: float, state_order=None) -> BsdeSolution:
    """Backward Euler on the grid ``k * dt``; the policy on cell k uses Theta at k + 1."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = n_cells_for(problem.horizon, dt)
    dt = problem.horizon / n
    variant = problem.variant
    xs, marks = problem.xs, problem.marks
    n_x, n_m = xs.shape[0], marks.shape[0]
    perm = np.arange(n_x) if state_order is None else np.asarray(state_order)
    if sorted(perm.tolist()) != list(range(n_x)):
        raise ValueError("state_order must be a permutation of the lattice")
    inv = np.argsort(perm)

    times = np.arange(n + 1) * dt
    r_grid, l_grid = problem.control.grids(times[:-1], xs)  # (n, n_x, n_u, n_m), (n, n_x, 2, n_u)
    cfl = cfl_number(problem, dt, r_grid)
    if cfl > CFL_LIMIT:
        raise CflError(f"CFL guard: (total rate) * dt = {cfl:.4g} > {CFL_LIMIT}")

    # work in permuted state order
    nb, ok = _neighbours(xs, marks)
    nb_p = inv[nb[perm]]
    ok_p = ok[perm]
    q0 = problem.q[perm, 0, :] * ok_p
    q1 = problem.q[perm, 1, :] * ok_p
    gam = problem.gamma[perm]
    r_grid = r_grid[:, perm]
    l_grid = l_grid[:, perm]
    g0, g1 = problem.terminal()
    g0, g1 = g0[perm], g1[perm]

    layered = variant in (Variant.AUX, Variant.EQUIV)
    # argmax exists only to plant a wrong selector in harness tests
    pick = np.argmin if problem.selector == "argmin" else np.argmax
    al0, ar0 = _weights(variant, 0)
    al1, ar1 = _weights(variant, 1)

    v = np.empty((n + 1, n_x, 2))
    theta = np.zeros((n + 1, n_x, 2, n_m + 1))
    gen = np.zeros((n, n_x, 2))
    pol = np.zeros((n, n_x, 2), np.int64)
    layer = None
    v0 = g0.copy()
    if layered:
        layer = np.empty((n + 1, n_x, n_x))
        w = np.broadcast_to(g1[None, :], (n_x, n_x)).copy()  # w[x_now, x_def]
        diag = np.arange(n_x)
        v1 = w[diag, diag].copy()
    else:
        v1 = g1.copy()

    def diff(vec):
        return np.where(ok_p, vec[nb_p] - vec[:, None], 0.0)

    def record(k):
        v[k, :, 0] = v0
        v[k, :, 1] = v1
        theta[k, :, 0, :n_m] = diff(v0)
        theta[k, :, 0, n_m] = v1 - v0
        if layered:
            layer[k] = w
            theta[k, :, 1, :n_m] = np.where(ok_p, w[nb_p, diag[:, None]] - w[diag, diag][:, None], 0.0)
        else:
            theta[k, :, 1, :n_m] = diff(v1)

    record(n)
    for k in range(n - 1, -1, -1):
        th0 = diff(v0)
        vals0 = action_values(l_grid[k, :, 0, :], th0, r_grid[k], q0, al0, ar0)
        u0 = pick(vals0, axis=1)
        f0 = vals0[np.arange(n_x), u0]
        if layered:
            # post-default layer: w[x, d]; jump sensitivity only through x_now
            thw = np.where(ok_p[:, :, None], w[nb_p, :] - w[:, None, :], 0.0)  # (x, m, d)
            thw = np.moveaxis(thw, 2, 0)  # (d, x, m)
            valsw = action_values(l_grid[k, None, :, 1, :], thw, r_grid[k][None], q1[None], al1, ar1)
            uw = pick(valsw, axis=-1)
            fw = np.take_along_axis(valsw, uw[..., None], axis=-1)[..., 0]  # (d, x)
            drift = np.einsum("dxm,xm->dx", thw, q1)
            w_new = w + dt * (fw + drift).T
            u1 = uw[diag, diag]
            f1 = fw[diag, diag]
            v0 = v0 + dt * (f0 + np.sum(q0 * th0, axis=1) + gam * (v1 - v0))
            w = w_new
            v1 = w[diag, diag].copy()
        else:
            th1 = diff(v1)
            vals1 = action_values(l_grid[k, :, 1, :], th1, r_grid[k], q1, al1, ar1)
            u1 = pick(vals1, axis=1)
            f1 = vals1[np.arange(n_x), u1]
            v0, v1 = (v0 + dt * (f0 + np.sum(q0 * th0, axis=1) + gam * (v1 - v0)),
                      v1 + dt * (f1 + np.sum(q1 * th1, axis=1)))
        pol[k, :, 0] = u0
        pol[k, :, 1] = u1
        gen[k, :, 0] = f0
        gen[k, :, 1] = f1
        record(k)

    # back to lattice order
    v = v[:, inv]
    theta = theta[:, inv]
    gen = gen[:, inv]
    pol = pol[:, inv]
    if layer is not None:
        layer = layer[:, inv][:, :, inv]
    policy = PolicyProcess(pol, dt, problem.bound, name="selector")
    y0 = float(v[0, problem.x0 + problem.bound, 0])
    return BsdeSolution(v, theta, y0, policy, times, dt, variant, xs, gen, cfl, float(problem.beta),
                        problem, layer)


def stop_solution(aux: BsdeSolution, tol=None) -> BsdeSolution:
    """Freeze v on post-default states at g(x, 1) and zero Theta there.

    ``stopped_drift`` records max |v(t, x, 1) - g(x, 1)| of the input, which
    the stopped identity says is zero up to solver error.
    """
    if aux.variant is not Variant.AUX:
        raise ValueError("stop_solution needs an AUXILIARY solution")
    _, g1 = aux.problem.terminal()
    drift = float(np.max(np.abs(aux.v[:, :, 1] - g1[None, :])))
    tol = 10 * aux.dt if tol is None else tol
    if drift > tol:
        raise ValueError(f"stopped identity violated: max |v(t,x,1) - g(x,1)| = {drift:.3g} > {tol:.3g}")
    v = aux.v.copy()
    v[:, :, 1] = g1[None, :]
    theta = aux.theta.copy()
    theta[:, :, 1, :] = 0.0
    layer = None if aux.layer is None else np.broadcast_to(g1[None, None, :], aux.layer.shape).copy()
    return BsdeSolution(v, theta, aux.y0, aux.policy.stopped(), aux.times, aux.dt, Variant.STOPPED, aux.xs,
                        aux.generator, aux.cfl, aux.beta, aux.problem, layer, stopped_drift=drift)


def weighted_norm(solution: BsdeSolution, beta=None, compensator=None, x0=None):
    """E[int e^{beta C} |Y|^2 dC] and E[int e^{beta C} |Theta|^2 dnu] by forward Feynman-Kac on the grid."""
    prob = solution.problem
    beta = solution.beta if beta is None else beta
    q = prob.q if compensator is None else np.asarray(rate_table(compensator), float)
    gam = prob.gamma
    xs, marks = solution.xs, prob.marks
    n_x, n_m = xs.shape[0], marks.shape[0]
    nb, ok = _neighbours(xs, marks)
    x0 = prob.x0 if x0 is None else x0
    dt = solution.dt
    n = solution.times.shape[0] - 1
    dens = np.zeros((n_x, 2))
    dens[x0 + solution.bound, 0] = 1.0
    qm = q * ok[:, None, :]
    clock = qm.sum(axis=-1)  # (n_x, 2)
    norm_y = 0.0
    norm_t = 0.0
    for k in range(n):
        v = solution.v[k]
        th = solution.theta[k]
        norm_y += dt * float(np.sum(dens * clock * v * v))
        jump = np.sum(qm * th[:, :, :n_m] ** 2, axis=-1)
        jump[:, 0] += gam * th[:, 0, n_m] ** 2
        norm_t += dt * float(np.sum(dens * jump))
        out = np.zeros_like(dens)
        for h in (0, 1):
            for m in range(n_m):
                np.add.at(out[:, h], nb[:, m], dens[:, h] * qm[:, h, m] * dt)
        out[:, 1] += dens[:, 0] * gam * dt
        stay = 1.0 - clock * dt
        stay[:, 0] -= gam * dt
        dens = out + dens * stay + beta * clock * dt * dens
    return norm_y, norm_t


def grid_convergence(problem, dts=(4e-3, 2e-3, 1e-3, 5e-4), safety=2.0):
    """Estimate C from the coarse pair, then check |Y0(dt) - Y0(dt/2)| <= C dt on the fine pair."""
    y = [solve_bsde(problem, d).y0 for d in dts]
    C = safety * abs(y[0] - y[1]) / dts[0]
    fine = abs(y[2] - y[3])
    return {"dts": list(dts), "y0": y, "C": C, "fine_diff": fine, "bound": C * dts[2],
            "pass": bool(fine <= C * dts[2] + 1e-14), "estimator": "deterministic",
            "tolerance": "C*dt"}


def path_values(batch, solution, k):
    """v(t_k, Z_{t_k}) on every path (right-continuous state at the grid time)."""
    t = solution.times[k]
    n = batch.n_paths
    marks = np.asarray(batch.marks)
    dx = np.where(batch.mark < batch.n_marks, marks[np.minimum(batch.mark, batch.n_marks - 1)], 0)
    keep = batch.times <= t
    x = batch.x0 + np.bincount(batch.jump_path, weights=dx * keep, minlength=n).astype(np.int64)
    h = (batch.tau <= t).astype(np.int64)
    xd = None
    if solution.layer is not None:
        before = batch.times < np.repeat(batch.tau, np.diff(batch.offsets))
        xd = batch.x0 + np.bincount(batch.jump_path, weights=dx * before, minlength=n).astype(np.int64)
    return solution.value_at(k, x, h, xd)


def martingale_property(solution, kernel, tau_model, n_paths, seed, fractions=(0.0, 0.25, 0.5, 1.0), k_se=3.0):
    """E[v(t, Z_t) + int_0^t f dC] = Y0 at the checkpoints, under P."""
    from . import rng
    from .process_core import simulate_chunk

    horizon = solution.problem.horizon
    n = solution.times.shape[0] - 1
    ks = [int(round(f * n)) for f in fractions]

    def one(i, size):
        b = simulate_chunk(rng.generator(seed, "bsde-mart", i), kernel, tau_model, horizon, size)
        out = np.empty((len(ks), size))
        for j, k in enumerate(ks):
            gen = solution.generator.copy()
            gen[k:] = 0.0
            out[j] = path_values(b, solution, k) + integrate_table(b, gen, solution.dt)
        return out

    vals = np.concatenate(rng.map_chunks(one, n_paths), axis=1)
    rows = []
    for j, k in enumerate(ks):
        mean = float(vals[j].mean())
        se = float(vals[j].std(ddof=1) / math.sqrt(n_paths))
        rows.append({"t": float(solution.times[k]), "mean": mean, "se": se,
                     "pass": bool(abs(mean - solution.y0) <= k_se * se + 1e-12)})
    return {"y0": solution.y0, "checkpoints": rows, "pass": all(r["pass"] for r in rows)}


__all__ = ["Variant", "BsdeProblem", "BsdeSolution", "CflError", "hamiltonian_f", "solve_bsde",
           "stop_solution", "weighted_norm", "grid_convergence", "martingale_property", "cell_of"]
