"""Controlled measures P_u = L^u_T P: the kernel R, the exponential L^u, thinning under P_u."""
from __future__ import annotations

import math
import warnings

import numpy as np

from . import rng
from .process_core import PathBatch, simulate_chunk


class ControlKernel:
    """Finite action set with jump-size multipliers r and running costs l.

    ``r(t, x, u)`` returns an (n, n_marks) array, one multiplier per X-mark;
    ``l(t, x, h, u)`` returns (n,). ``t``, ``x``, ``h``, ``u`` are equal-length
    arrays (``u`` holds action indices).
    """

    def __init__(self, actions, r, l, M_r, M_l, n_marks):
        self.actions = tuple(actions)
        if not self.actions:
            raise ValueError("action set must not be empty")
        if not M_r > 1 or not M_l > 0:
            raise ValueError("need M_r > 1 and M_l > 0")
        self._r = r
        self._l = l
        self.M_r = float(M_r)
        self.M_l = float(M_l)
        self.n_marks = int(n_marks)
        self.r_table = None
        self.l_table = None

    @property
    def n_actions(self):
        return len(self.actions)

    def r(self, t, x, u):
        out = np.asarray(self._r(np.asarray(t, float), np.asarray(x), np.asarray(u)), float)
        if out.size and (out.min() < 0 or out.max() > self.M_r * (1 + 1e-12)):
            raise ValueError(f"r outside [0, M_r = {self.M_r}]")
        return out

    def l(self, t, x, h, u):
        out = np.asarray(self._l(np.asarray(t, float), np.asarray(x), np.asarray(h), np.asarray(u)), float)
        if out.size and np.max(np.abs(out)) > self.M_l * (1 + 1e-12):
            raise ValueError(f"|l| exceeds M_l = {self.M_l}")
        return out

    def grids(self, times, xs):
        """r on (t, x, u, mark) and l on (t, x, h, u) over the given nodes."""
        n_t, n_x, n_u = len(times), len(xs), self.n_actions
        T, X, U = np.meshgrid(np.asarray(times, float), np.asarray(xs), np.arange(n_u), indexing="ij")
        r = self.r(T.ravel(), X.ravel(), U.ravel()).reshape(n_t, n_x, n_u, self.n_marks)
        T, X, H, U = np.meshgrid(np.asarray(times, float), np.asarray(xs), np.arange(2), np.arange(n_u),
                                 indexing="ij")
        l = self.l(T.ravel(), X.ravel(), H.ravel(), U.ravel()).reshape(n_t, n_x, 2, n_u)
        return r, l

    def L_sup(self, times, xs):
        r, _ = self.grids(times, xs)
        return float(np.max(np.abs(r - 1.0)))

    @classmethod
    def from_tables(cls, actions, r_table, l_table, M_r, M_l):
        """Time- and state-free kernels: ``r_table[u, m]``, ``l_table[u]`` or ``l_table[u, h]``."""
        r_table = np.asarray(r_table, float)
        l_table = np.asarray(l_table, float)
        if l_table.ndim == 1:
            l_table = np.repeat(l_table[:, None], 2, axis=1)
        n_u, n_m = r_table.shape
        if l_table.shape != (n_u, 2):
            raise ValueError("l_table must have one row per action")
        if r_table.min() < 0 or r_table.max() > M_r:
            raise ValueError(f"r outside [0, M_r = {M_r}]")
        if np.max(np.abs(l_table)) > M_l:
            raise ValueError(f"|l| exceeds M_l = {M_l}")
        k = cls(actions, lambda t, x, u: r_table[u], lambda t, x, h, u: l_table[u, h], M_r, M_l, n_m)
        k.r_table = r_table
        k.l_table = l_table
        return k


class PolicyProcess:
    """Feedback policy on the grid: ``table[k, x + bound, h]`` is the action on cell k.

    With ``in_C_hat`` the policy uses the sentinel action 0 on every post-default state.
    """

    def __init__(self, table, dt, bound, in_C_hat=False, name=""):
        self.table = np.ascontiguousarray(table, dtype=np.int64)
        if self.table.ndim != 3 or self.table.shape[1] != 2 * bound + 1 or self.table.shape[2] != 2:
            raise ValueError("policy table must have shape (n_cells, 2*bound+1, 2)")
        self.dt = float(dt)
        self.bound = int(bound)
        self.name = name
        if in_C_hat and np.any(self.table[:, :, 1] != 0):
            raise ValueError("policy is not in C-hat: nonzero action after default")
        self.in_C_hat = bool(in_C_hat) or bool(np.all(self.table[:, :, 1] == 0))

    @property
    def n_cells(self):
        return self.table.shape[0]

    @property
    def horizon(self):
        return self.n_cells * self.dt

    @classmethod
    def constant(cls, u, n_cells, dt, bound, in_C_hat=False):
        table = np.full((n_cells, 2 * bound + 1, 2), int(u), dtype=np.int64)
        if in_C_hat:
            table[:, :, 1] = 0
        return cls(table, dt, bound, in_C_hat=in_C_hat)

    def stopped(self):
        """u 1_{[0, T ^ tau]}: sentinel action after default."""
        t = self.table.copy()
        t[:, :, 1] = 0
        return PolicyProcess(t, self.dt, self.bound, in_C_hat=True, name=self.name)

    def action(self, state):
        """Action at each state; ``state.cell`` must come from this policy's grid."""
        k = np.clip(state.cell, 0, self.n_cells - 1)
        return self.table[k, state.x + self.bound, state.h]

    def check_grid(self, horizon):
        if abs(self.horizon - horizon) > 1e-9 * max(1.0, horizon):
            raise ValueError("policy grid does not cover the horizon")

    def to_csv(self, path):
        import csv

        xs = np.arange(-self.bound, self.bound + 1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "h", "u_index"])
            for k in range(self.n_cells):
                t = f"{k * self.dt:.10g}"
                for i, x in enumerate(xs):
                    for h in (0, 1):
                        w.writerow([t, int(x), h, int(self.table[k, i, h])])


def kernel_R(r, t, x, h_jump_flag, u):
    """R(x1, x2, u) = r(x1, u) on X-jumps, 1 on the default jump.

    ``r`` is a number or a callable ``r(t, x, u)``.
    """
    if h_jump_flag:
        return 1.0
    return float(r(t, x, u)) if callable(r) else float(r)


def rate_table(compensator):
    """X-intensity table (n_x, 2, n_marks) of a time-homogeneous compensator, or None."""
    tab = getattr(compensator, "table", None)
    if tab is not None:
        return tab
    pre = getattr(getattr(compensator, "pre_tau", None), "table", None)
    post = getattr(getattr(compensator, "post_tau", None), "table", None)
    if pre is None or post is None:
        return None
    return np.stack([pre[:, 0, :], post[:, 1, :]], axis=1)


def cell_of(t, dt, n_cells):
    return np.minimum((np.asarray(t, float) / dt).astype(np.int64), n_cells - 1)


def integrate_table(batch, table, dt):
    """Per-path integral of ``table[cell(t), X_t, H_t]`` over [0, T], exact (cuts at jumps only)."""
    n_cells = table.shape[0]
    G = np.zeros((n_cells + 1,) + table.shape[1:])
    np.cumsum(table * dt, axis=0, out=G[1:])
    seg = batch.segments(None)
    ix = seg.x + batch.bound

    def G_at(t):
        k = cell_of(t, dt, n_cells)
        return G[k, ix, seg.h] + (t - k * dt) * table[k, ix, seg.h]

    return np.bincount(seg.path, weights=G_at(seg.b) - G_at(seg.a), minlength=batch.n_paths)


def jump_states_on(batch, policy):
    """Pre-jump states with cells on the policy grid."""
    js = batch.jump_state(None)
    js.cell = cell_of(js.t, policy.dt, policy.n_cells)
    return js


def action_tables(policy, control):
    """r[k, ix, h, m] and l[k, ix, h] of the policy's actions on every grid node."""
    n_cells, n_x = policy.n_cells, 2 * policy.bound + 1
    times = np.arange(n_cells) * policy.dt
    xs = np.arange(-policy.bound, policy.bound + 1)
    K, X, H = np.meshgrid(np.arange(n_cells), np.arange(n_x), np.arange(2), indexing="ij")
    u = policy.table[K, X, H].ravel()
    r = control.r(times[K].ravel(), xs[X].ravel(), u).reshape(n_cells, n_x, 2, -1)
    l = control.l(times[K].ravel(), xs[X].ravel(), H.ravel(), u).reshape(n_cells, n_x, 2)
    return r, l


def log_L(batch: PathBatch, policy: PolicyProcess, compensator, control: ControlKernel, tables=None):
    """log L^u_T for each path; exact between jumps for piecewise-constant data."""
    policy.check_grid(batch.horizon)
    r_tab, _ = action_tables(policy, control) if tables is None else tables
    lam_tab = rate_table(compensator)
    if lam_tab is not None:
        drift = integrate_table(batch, np.sum((1.0 - r_tab) * lam_tab[None], axis=-1), policy.dt)
    else:
        seg = batch.segments(policy.dt)
        st = seg.state("left")
        lam = compensator.intensity(st)[:, :-1]
        r = r_tab[st.cell, st.x + batch.bound, st.h]
        drift = np.bincount(seg.path, weights=np.sum((1.0 - r) * lam, axis=1) * seg.length,
                            minlength=batch.n_paths)
    is_x = batch.mark < batch.n_marks
    logs = np.zeros(batch.mark.shape[0])
    if np.any(is_x):
        js = jump_states_on(batch, policy)
        rm = r_tab[js.cell[is_x], js.x[is_x] + batch.bound, js.h[is_x], batch.mark[is_x]]
        with np.errstate(divide="ignore"):
            logs[is_x] = np.log(rm)
        if np.any(rm == 0):
            warnings.warn("r = 0 at a realized X-jump: L^u collapses to 0 on that path", RuntimeWarning)
    return drift + np.bincount(batch.jump_path, weights=logs, minlength=batch.n_paths)


def doleans_L(path, policy, kernel, control):
    """L^u_T along one MarkedPath."""
    batch = PathBatch.from_paths([path], kernel.marks, kernel.bound)
    return float(np.exp(log_L(batch, policy, kernel, control))[0])


def doleans_L_batch(batch, policy, compensator, control, tables=None):
    with np.errstate(over="ignore"):
        return np.exp(log_L(batch, policy, compensator, control, tables))


def is_trivial(control, policy):
    """r == 1 on every action used by the policy (then L^u == 1 exactly)."""
    if control.r_table is None:
        return False
    return bool(np.all(control.r_table[np.unique(policy.table)] == 1.0))


def check_unit_expectation(kernel, tau_model, policy, control, n_paths, seed, horizon=None,
                           compensator=None, k=3.0):
    """Monte Carlo check of E[L^u_T] = 1 with the sample second moment."""
    if n_paths < 10_000:
        raise ValueError("check_unit_expectation needs at least 10^4 paths")
    horizon = policy.horizon if horizon is None else horizon
    comp = kernel if compensator is None else compensator

    tables = action_tables(policy, control)

    def one(i, size):
        b = simulate_chunk(rng.generator(seed, "unit", i), kernel, tau_model, horizon, size)
        return doleans_L_batch(b, policy, comp, control, tables)

    L = np.concatenate(rng.map_chunks(one, n_paths))
    mean = float(L.mean())
    se = float(L.std(ddof=1) / math.sqrt(n_paths))
    second = float(np.mean(L * L))
    ok = math.isfinite(second) and (abs(mean - 1.0) <= k * se or (se == 0 and mean == 1.0))
    return {"mean_L": mean, "se": se, "second_moment": second, "pass": bool(ok),
            "estimator": "mc", "tolerance": f"{k:g}*se"}


def controlled_table(kernel, policy, control):
    """X-intensities under P_u on the policy grid: (n_cells, n_x, 2, n_marks)."""
    if kernel.table is None:
        raise ValueError("controlled simulation needs a tabulated (time-homogeneous) kernel")
    if kernel.table.shape[0] != 2 * policy.bound + 1:
        raise ValueError("policy and kernel lattices differ")
    r, _ = action_tables(policy, control)
    return kernel.table[None, :, :, :] * r


def simulate_batch_under_Pu(kernel, tau_model, policy, control, horizon, n_paths, seed, label="Pu"):
    """Paths under P_u by thinning with envelope M_r * rate_bound; tau keeps its P-law."""
    if getattr(tau_model, "needs_x", False):
        raise ValueError("controlled simulation requires a default time independent of X")
    policy.check_grid(horizon)
    kernel.check_bounded()
    table = np.ascontiguousarray(controlled_table(kernel, policy, control))
    envelope = control.M_r * kernel.rate_bound
    if np.any(table.sum(axis=-1) > envelope * (1 + 1e-12)):
        raise ValueError("controlled intensity exceeds the M_r envelope")

    def one(i, size):
        return simulate_chunk(rng.generator(seed, label, i), kernel, tau_model, horizon, size,
                              table=table, cell_dt=policy.dt, envelope=envelope)

    return PathBatch.concat(rng.map_chunks(one, n_paths))


def simulate_under_Pu(kernel, tau_model, policy, control, T, seed):
    return simulate_batch_under_Pu(kernel, tau_model, policy, control, T, 1, seed, label="Pu-single").path(0)
