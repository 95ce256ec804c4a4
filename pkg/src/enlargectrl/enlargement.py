"""Random default times and compensators in the progressively enlarged filtration.

Two random-time models are supported:

* :class:`CoxTime`: exponential clock independent of X, so avoidance and
  immersion hold and the X-compensator is unchanged by the enlargement.
* :class:`JacodDensity`: the conditional density of tau given F_t switches
  once, at the first X-jump, from the prior to a mark-dependent density.
  The enlarged X-compensator picks up the multipliers ``1 + W'/A_-`` before
  tau and ``1 + U`` after it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .process_core import CompensatorKernel, PathState

A_FLOOR = 1e-12


class ModelMalformation(ValueError):
    """A model reaches a state the theory excludes (e.g. A_- = 0 before tau)."""


# -- Cox ---------------------------------------------------------------------

@dataclass(frozen=True)
class CoxTime:
    """tau ~ Exp(gamma) independent of X; gamma = 0 means tau = +inf."""

    gamma: float
    needs_x = False

    def __post_init__(self):
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ValueError("gamma must be finite and nonnegative")

    @property
    def is_immersion(self):
        return True

    def sample(self, gen, n):
        if self.gamma == 0:
            return np.full(n, math.inf)
        return gen.exponential(1.0 / self.gamma, n)

    def survival(self, t):
        return np.exp(-self.gamma * np.asarray(t, float))

    def check_horizon(self, horizon):
        if self.gamma * horizon > -math.log(A_FLOOR):
            raise ModelMalformation(f"A_t = exp(-gamma t) falls below {A_FLOOR} before the horizon")

    def default_rate(self, state):
        return np.full(len(state), self.gamma)

    def cum_hazard(self, t, first_time=math.inf, first_mark=-1):
        return self.gamma * np.asarray(t, float)

    def A(self, t, first_time=math.inf, first_mark=-1):
        return self.survival(t)

    def to_json(self):
        return {"type": "cox", "gamma": self.gamma}


# -- Jacod -------------------------------------------------------------------

class _Linear:
    """Nonnegative piecewise-linear density on a grid, zero past the last node."""

    def __init__(self, u, y):
        self.u = u
        self.y = y
        self.slope = np.diff(y) / np.diff(u)
        self.cum = np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(u))])

    def _cell(self, t):
        return np.clip(np.searchsorted(self.u, t, side="right") - 1, 0, self.u.shape[0] - 2)

    def value(self, t):
        t = np.asarray(t, float)
        j = self._cell(t)
        v = self.y[j] + self.slope[j] * (t - self.u[j])
        return np.where((t >= self.u[0]) & (t <= self.u[-1]), v, 0.0)

    def integral(self, t):
        t = np.clip(np.asarray(t, float), self.u[0], self.u[-1])
        j = self._cell(t)
        s = t - self.u[j]
        return self.cum[j] + self.y[j] * s + 0.5 * self.slope[j] * s * s

    @property
    def total(self):
        return float(self.cum[-1])

    def inverse(self, v):
        """Smallest t with integral(t) = v, for v < total."""
        v = np.asarray(v, float)
        j = np.clip(np.searchsorted(self.cum, v, side="right") - 1, 0, self.u.shape[0] - 2)
        rem = v - self.cum[j]
        a = 0.5 * self.slope[j]
        b = self.y[j]
        disc = np.sqrt(np.maximum(b * b + 4.0 * a * rem, 0.0))
        den = b + disc
        s = np.divide(2.0 * rem, den, out=np.zeros_like(rem), where=den > 0)
        return self.u[j] + np.minimum(s, self.u[j + 1] - self.u[j])


class JacodDensity:
    """Conditional density of tau that switches at the first X-jump.

    Regime 0 holds before the first X-jump; regime ``1 + m`` after a first jump
    with mark index ``m``. ``p[r, j]`` is p^{(r)}(u_grid[j]) and ``p_inf[r]`` the
    density at +infinity, both relative to ``eta``: the prior density on the
    grid (linear interpolation of ``eta * p`` between nodes) plus ``eta_inf``,
    the atom at +infinity. The F-martingale property of p_t(u) comes from the
    first X-mark law ``mark_probs``: ``sum_m probs[m] p^{(1+m)} = p^{(0)} = 1``.
    """

    needs_x = True
    tol = 1e-9

    def __init__(self, u_grid, eta, eta_inf, p, p_inf, mark_probs):
        self.u = np.asarray(u_grid, float)
        self.eta = np.asarray(eta, float)
        self.eta_inf = float(eta_inf)
        self.p = np.atleast_2d(np.asarray(p, float))
        self.p_inf = np.asarray(p_inf, float)
        self.probs = np.asarray(mark_probs, float)
        self._validate()
        self.f = [_Linear(self.u, self.p[r] * self.eta) for r in range(self.n_regimes)]
        self.f_inf = self.p_inf * self.eta_inf
        self._eta = _Linear(self.u, self.eta)

    @property
    def n_regimes(self):
        return self.p.shape[0]

    def _validate(self):
        u, n_r = self.u, self.p.shape[0]
        if u.ndim != 1 or u.shape[0] < 2 or u[0] != 0.0 or np.any(np.diff(u) <= 0):
            raise ValueError("u_grid must be increasing, start at 0 and have at least two nodes")
        if self.eta.shape != u.shape or self.p.shape[1] != u.shape[0] or self.p_inf.shape != (n_r,):
            raise ValueError("density table shapes do not match u_grid")
        if self.probs.shape != (n_r - 1,) or np.any(self.probs < 0) or abs(self.probs.sum() - 1) > self.tol:
            raise ValueError("mark_probs must be a probability vector with one entry per X-mark")
        if np.any(self.eta < 0) or self.eta_inf < 0 or np.any(self.p < 0) or np.any(self.p_inf < 0):
            raise ValueError("densities must be nonnegative")
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.eta))):
            raise ValueError("densities must be finite")
        eta_mass = float(np.sum(0.5 * (self.eta[1:] + self.eta[:-1]) * np.diff(u))) + self.eta_inf
        if abs(eta_mass - 1.0) > 1e-6:
            raise ValueError(f"eta has total mass {eta_mass}, expected 1")
        if np.max(np.abs(self.p[0] - 1.0)) > self.tol or abs(self.p_inf[0] - 1.0) > self.tol:
            raise ValueError("regime 0 must carry the prior (p = 1)")
        mix = self.probs @ self.p[1:]
        mix_inf = float(self.probs @ self.p_inf[1:])
        live = self.eta > 0
        if np.max(np.abs(mix - 1.0)[live], initial=0.0) > 1e-6 or (self.eta_inf > 0 and abs(mix_inf - 1.0) > 1e-6):
            raise ValueError("p_t(u) is not an F-martingale: the mark-weighted post-jump density differs from 1")
        for r in range(n_r):
            fr = self.p[r] * self.eta
            mass = float(np.sum(0.5 * (fr[1:] + fr[:-1]) * np.diff(u))) + self.p_inf[r] * self.eta_inf
            if abs(mass - 1.0) > 1e-6:
                raise ValueError(f"conditional density of regime {r} integrates to {mass}, expected 1")

    # construction

    @classmethod
    def from_regime_densities(cls, u_grid, f, f_inf, mark_probs):
        """Build from per-X-mark conditional densities f[m](u) on the grid and atoms f_inf[m]."""
        f = np.asarray(f, float)
        f_inf = np.asarray(f_inf, float)
        probs = np.asarray(mark_probs, float)
        eta = probs @ f
        eta_inf = float(probs @ f_inf)
        p_rows = np.divide(f, eta[None, :], out=np.ones_like(f), where=eta[None, :] > 0)
        p_inf = f_inf / eta_inf if eta_inf > 0 else np.ones_like(f_inf)
        p = np.vstack([np.ones_like(eta), p_rows])
        return cls(u_grid, eta, eta_inf, p, np.concatenate([[1.0], p_inf]), probs)

    @classmethod
    def exponential_mixture(cls, gammas, mark_probs, u_max=4.0, n_grid=4000):
        """tau | first mark m ~ Exp(gammas[m]), tabulated on ``n_grid`` cells of [0, u_max]."""
        u = np.linspace(0.0, u_max, n_grid + 1)
        g = np.asarray(gammas, float)
        if np.any(g <= 0):
            raise ValueError("rates must be positive")
        f = g[:, None] * np.exp(-g[:, None] * u[None, :])
        mass = np.sum(0.5 * (f[:, 1:] + f[:, :-1]) * np.diff(u)[None, :], axis=1)
        return cls.from_regime_densities(u, f, 1.0 - mass, mark_probs)

    @classmethod
    def from_json(cls, d, mark_probs=None):
        if "family" in d:
            if d["family"] != "exponential_mixture":
                raise ValueError(f"unknown density family {d['family']!r}")
            probs = d.get("mark_probs", mark_probs)
            return cls.exponential_mixture(d["gammas"], probs, d.get("u_max", 4.0), d.get("n_grid", 4000))
        return cls(d["u_grid"], d["eta"], d["eta_inf"], d["density_table"], d["p_inf"],
                   d.get("mark_probs", mark_probs))

    def to_json(self):
        return {"type": "jacod", "u_grid": self.u.tolist(), "eta": self.eta.tolist(),
                "eta_inf": self.eta_inf, "density_table": self.p.tolist(), "p_inf": self.p_inf.tolist(),
                "mark_probs": self.probs.tolist()}

    # model quantities

    @property
    def is_immersion(self):
        """True when p_t(u) does not move with t (tau independent of X)."""
        return bool(np.max(np.abs(self.p - 1.0)) <= self.tol and np.max(np.abs(self.p_inf - 1.0)) <= self.tol)

    def regime(self, first):
        return np.asarray(first, np.int64) + 1

    def survival_regime(self, r, t):
        return 1.0 - self.f[r].integral(t)

    def density_regime(self, r, t):
        return self.f[r].value(t)

    def p_value(self, r, u):
        """p^{(r)}(u), with u = +inf allowed; 0/0 treated as 0 where eta vanishes."""
        u = np.asarray(u, float)
        r = np.broadcast_to(np.asarray(r, np.int64), u.shape)
        out = np.empty(u.shape)
        fin = np.isfinite(u)
        uf, rf = u[fin], r[fin]
        eta = self._eta.value(uf)
        fr = np.zeros(uf.shape)
        for rr in np.unique(rf):
            sel = rf == rr
            fr[sel] = self.f[rr].value(uf[sel])
        out[fin] = np.divide(fr, eta, out=np.zeros_like(fr), where=eta > 0)
        out[~fin] = self.p_inf[r[~fin]]
        return out

    def _by_regime(self, first, fn):
        first = np.asarray(first, np.int64)
        out = np.empty(first.shape)
        for r in range(self.n_regimes):
            sel = first == r - 1
            if np.any(sel):
                out[sel] = fn(r, sel)
        return out

    def A(self, t, first_time=math.inf, first_mark=-1):
        """Azema supermartingale P[tau > t | F_t] given the first X-jump (time, mark index)."""
        t = np.asarray(t, float)
        r = np.where(np.asarray(first_time) <= t, np.asarray(first_mark) + 1, 0)
        return np.vectorize(lambda rr, tt: float(self.survival_regime(int(rr), tt)))(r, t)

    def check_horizon(self, horizon):
        grid = np.linspace(0.0, horizon, 1001)
        for r in range(self.n_regimes):
            if np.min(self.survival_regime(r, grid)) < A_FLOOR:
                raise ModelMalformation(f"A_- falls below {A_FLOOR} before the horizon in regime {r}")
        if horizon > self.u[-1]:
            raise ValueError("u_grid must cover the horizon")

    def default_rate(self, state):
        def rate(r, sel):
            s = self.survival_regime(r, state.t[sel])
            if np.any(s < A_FLOOR):
                raise ModelMalformation("A_- underflow before tau")
            return self.density_regime(r, state.t[sel]) / s

        return self._by_regime(state.first, rate) if len(state) else np.zeros(0)

    def cum_hazard(self, t, first_time=math.inf, first_mark=-1):
        """Integral of the default rate over [0, t], exact for the tabulated densities."""
        t = np.asarray(t, float)
        s1 = np.minimum(t, first_time)
        out = -np.log(self.survival_regime(0, s1))
        if np.any(t > first_time):
            r = int(first_mark) + 1
            out = out + np.where(t > first_time, -np.log(self.survival_regime(r, t))
                                 + np.log(self.survival_regime(r, first_time)), 0.0)
        return out

    def pre_multiplier(self, state):
        """1 + W'/A_- per X-mark: S_{1+m}(t)/S_0(t) before the first jump, 1 after."""
        n, n_m = len(state), self.n_regimes - 1
        out = np.ones((n, n_m))
        pre = state.first < 0
        if np.any(pre):
            s0 = self.survival_regime(0, state.t[pre])
            if np.any(s0 < A_FLOOR):
                raise ModelMalformation("A_- underflow before tau")
            for m in range(n_m):
                out[pre, m] = self.survival_regime(m + 1, state.t[pre]) / s0
        return out

    def post_multiplier(self, state):
        """1 + U per X-mark: p^{(1+m)}(tau) / p^{(0)}(tau) before the first jump, 1 after."""
        n, n_m = len(state), self.n_regimes - 1
        out = np.ones((n, n_m))
        pre = state.first < 0
        if np.any(pre):
            tau = state.tau[pre]
            p_minus = self.p_value(np.zeros(tau.shape, np.int64), tau)
            for m in range(n_m):
                out[pre, m] = jump_multiplier(p_minus, self.p_value(np.full(tau.shape, m + 1), tau))
        return out

    def sample_given_x(self, gen, off, times, marks, kernel):
        n = off.shape[0] - 1
        fallback = gen.choice(self.probs.shape[0], size=n, p=self.probs)
        v = gen.uniform(0.0, 1.0, n)
        has = np.diff(off) > 0
        xi = np.where(has, marks[np.minimum(off[:-1], max(marks.shape[0] - 1, 0))] if marks.shape[0] else 0,
                      fallback)
        tau = np.full(n, math.inf)
        for m in range(self.probs.shape[0]):
            sel = xi == m
            f = self.f[m + 1]
            fin = sel & (v < f.total)
            tau[fin] = f.inverse(v[fin])
        # tau > 0 a.s.; guard the measure-zero draw v == 0
        tau[tau <= 0] = np.nextafter(0.0, 1.0)
        return tau

    def check_density_martingale(self, kernel, horizon, n_paths, seed, k=3.0):
        """E[p_T(u)] = 1 at every grid node u, by Monte Carlo over the first X-mark."""
        from .process_core import simulate_batch

        batch = simulate_batch(kernel, _NoDefault(), horizon, n_paths, seed, label="density")
        has = np.diff(batch.offsets) > 0
        r = np.where(has, batch.mark[np.minimum(batch.offsets[:-1], max(batch.mark.shape[0] - 1, 0))] + 1, 0)
        worst = 0.0
        ok = True
        for j, u in enumerate(self.u):
            if self.eta[j] == 0:
                continue
            vals = self.p[r, j]
            mean = vals.mean()
            se = vals.std(ddof=1) / math.sqrt(n_paths)
            worst = max(worst, abs(mean - 1.0) / se if se > 0 else (0.0 if mean == 1.0 else math.inf))
            ok &= abs(mean - 1.0) <= k * se or se == 0 and abs(mean - 1.0) < 1e-12
        return {"pass": bool(ok), "max_z": float(worst)}


class _NoDefault:
    needs_x = False

    def sample(self, gen, n):
        return np.full(n, math.inf)


def jump_multiplier(p_minus, p_plus):
    """1 + U = p_t(tau)/p_{t-}(tau), with U := 0 where p_{t-}(tau) = 0."""
    p_minus = np.asarray(p_minus, float)
    p_plus = np.asarray(p_plus, float)
    return np.divide(p_plus, p_minus, out=np.ones(np.broadcast(p_minus, p_plus).shape), where=p_minus > 0)


def tau_model_from_json(d, mark_probs=None):
    kind = d.get("type")
    if kind == "cox":
        return CoxTime(float(d["gamma"]))
    if kind == "jacod":
        return JacodDensity.from_json(d, mark_probs)
    raise ValueError(f"unknown tau_model type {kind!r}")


# -- operations --------------------------------------------------------------

def azema_A(model, t, horizon=None, first_time=math.inf, first_mark=-1):
    """A_t = P[tau > t | F_t]; ``first_time``/``first_mark`` give the path prefix for Jacod models."""
    t_arr = np.asarray(t, float)
    if np.any(t_arr < 0) or (horizon is not None and np.any(t_arr > horizon)):
        raise ValueError("t must lie in [0, T]")
    out = model.A(t_arr, first_time, first_mark)
    return float(out) if np.ndim(out) == 0 else out


def lambda_G(model, t, tau, horizon=None, first_time=math.inf, first_mark=-1):
    """Lambda^G_t, the G-compensator of H; flat after tau."""
    t_arr = np.asarray(t, float)
    if np.any(t_arr < 0) or (horizon is not None and np.any(t_arr > horizon)):
        raise ValueError("t must lie in [0, T]")
    s = np.minimum(t_arr, tau)
    a_minus = np.asarray(model.A(s, first_time, first_mark))
    if np.any(a_minus < A_FLOOR):
        raise ModelMalformation(f"A_- = {a_minus.min()} below {A_FLOOR} before tau")
    out = model.cum_hazard(s, first_time, first_mark)
    return float(out) if np.ndim(out) == 0 else out


class EnlargedCompensator:
    """nu^{G,Z}: X-branches before and after tau plus the default rate (density of Lambda^G)."""

    def __init__(self, pre_tau, post_tau, default_rate, name=""):
        if pre_tau.marks != post_tau.marks:
            raise ValueError("branches disagree on the mark set")
        self.pre_tau = pre_tau
        self.post_tau = post_tau
        self.default_rate = default_rate
        self.marks = pre_tau.marks
        self.bound = getattr(pre_tau, "bound", None)
        self.name = name

    @property
    def n_marks(self):
        return len(self.marks)

    def intensity(self, state):
        out = np.zeros((len(state), self.n_marks + 1))
        pre = state.h == 0
        if np.any(pre):
            s = _take(state, pre)
            out[pre, :-1] = self.pre_tau.intensity(s)[:, :-1]
            out[pre, -1] = self.default_rate(s)
        if np.any(~pre):
            out[~pre, :-1] = self.post_tau.intensity(_take(state, ~pre))[:, :-1]
        return out

    def stopped(self):
        """Compensator of the stopped pair (X^tau, H): the post-tau branch is switched off."""
        zero = CompensatorKernel(self.marks, intensity=lambda s: np.zeros((len(s), self.n_marks + 1)),
                                 rate_bound=0.0)
        return EnlargedCompensator(self.pre_tau, zero, self.default_rate, name=self.name + "^tau")

    def cumulative_clock(self, state, grid, rule="left"):
        """Total clock C(t) on ``grid`` for a frozen state (x, h, n_x, first, tau)."""
        t = np.asarray(grid, float)
        mid = t[:-1] if rule == "left" else 0.5 * (t[1:] + t[:-1])
        n = mid.shape[0]
        st = PathState(mid, np.full(n, state.get("x", 0)), np.full(n, state.get("h", 0)),
                       np.full(n, state.get("n_x", 0)), np.full(n, state.get("first", -1)),
                       np.full(n, state.get("tau", math.inf)), np.zeros(n, np.int64), np.zeros(n, np.int64))
        rate = self.intensity(st).sum(axis=1)
        return np.concatenate([[0.0], np.cumsum(rate * np.diff(t))])


def _take(st, mask):
    return PathState(st.t[mask], st.x[mask], st.h[mask], st.n_x[mask], st.first[mask],
                     st.tau[mask], st.cell[mask], st.path[mask])


def _scaled(kernel, mult_fn, name):
    def intensity(s, _k=kernel):
        lam = _k.intensity(s).copy()
        lam[:, :-1] *= mult_fn(s)
        return lam

    out = CompensatorKernel(kernel.marks, intensity=intensity, rate_bound=math.inf, name=name)
    out.bound = getattr(kernel, "bound", None)
    return out


def nu_GX_immersion(nu_FX, model=None):
    """(pre_tau, post_tau) = (nu_FX, nu_FX): the X-compensator survives the enlargement."""
    if model is not None and not model.is_immersion:
        raise ValueError("immersion fails for this density model (p_t(u) depends on t); use nu_GX_jacod")
    return nu_FX, nu_FX


def check_first_mark_law(nu_FX, model, x0=0):
    """The Jacod table is tied to the law of the first X-mark; check it matches the kernel."""
    st = PathState.single(np.linspace(0.0, 1.0, 11), x=x0)
    law = nu_FX.intensity(st)[:, :-1]
    clock = law.sum(axis=1, keepdims=True)
    law = np.divide(law, clock, out=np.zeros_like(law), where=clock > 0)
    if np.max(np.abs(np.ptp(clock, axis=0))) > 1e-12 or np.max(np.abs(law - model.probs[None, :])) > 1e-9:
        raise ValueError("first X-mark law of the kernel does not match the density model's mark_probs")


def nu_GX_jacod(nu_FX, model, x0=0):
    """X-compensator branches under the density hypothesis."""
    if nu_FX.n_marks != model.n_regimes - 1:
        raise ValueError("density model and kernel have different mark sets")
    check_first_mark_law(nu_FX, model, x0)

    def pre(s):
        m = model.pre_multiplier(s)
        if np.any(m < 0):
            raise ValueError("negative pre-tau multiplier: A_- + W' < 0")
        return m

    def post(s):
        m = model.post_multiplier(s)
        if np.any(m < 0):
            raise ValueError("negative post-tau multiplier: 1 + U < 0")
        return m

    return _scaled(nu_FX, pre, "pre_tau"), _scaled(nu_FX, post, "post_tau")


def assemble_nu_Z_additive(nu_GX, lambda_provider, name="nu_GZ"):
    """nu^{G,Z} = nu^{G,X} (x) delta_0 + delta_0 (x) dLambda^G on the default mark."""
    pre, post = nu_GX
    rate = lambda_provider.default_rate if hasattr(lambda_provider, "default_rate") else lambda_provider
    return EnlargedCompensator(pre, post, rate, name=name)


def enlarged_compensator(nu_FX, model, horizon, x0=0):
    """Pick the right branch construction for the model and assemble nu^{G,Z}."""
    model.check_horizon(horizon)
    if model.is_immersion:
        branches = nu_GX_immersion(nu_FX, model)
    else:
        branches = nu_GX_jacod(nu_FX, model, x0)
    return assemble_nu_Z_additive(branches, model)


# -- quasi-left continuity ----------------------------------------------------

def qlc_atom_scan(compensator, grid_dt, horizon=1.0, start=0.0, tol=1e-3, state=None, grid=None):
    """Times where a clock jumps by more than ``tol``.

    ``compensator`` is either a callable cumulative clock C(t) or an
    :class:`EnlargedCompensator` (scanned along the frozen ``state``, or every
    default-free and post-default state at x0 when none is given). The atom mass
    of a cell is its clock increment minus the smaller neighbouring increment;
    atoms are reported at the right endpoint of the cell.
    """
    if grid is None:
        n = max(2, int(round((horizon - start) / grid_dt)))
        grid = start + grid_dt * np.arange(n + 1)
    grid = np.asarray(grid, float)
    if isinstance(compensator, EnlargedCompensator):
        states = [state] if state is not None else _scan_states(compensator)
        atoms = {}
        for s in states:
            for t, m in _atoms(grid, compensator.cumulative_clock(s, grid), tol):
                atoms[t] = max(m, atoms.get(t, 0.0))
        return sorted(atoms.items())
    clock = np.asarray(compensator(grid), float)
    return _atoms(grid, clock, tol)


def _scan_states(comp):
    states = [{"h": 0, "first": -1}]
    for m in range(comp.n_marks):
        states.append({"h": 0, "first": m, "n_x": 1, "x": comp.marks[m]})
    for tau in (0.25, 0.5):
        states.append({"h": 1, "first": -1, "tau": tau})
    return states


def _atoms(grid, clock, tol):
    inc = np.diff(clock)
    if inc.shape[0] == 0:
        return []
    left = np.concatenate([[np.inf], inc[:-1]])
    right = np.concatenate([inc[1:], [np.inf]])
    base = np.minimum(left, right)
    base[~np.isfinite(base)] = 0.0
    mass = inc - base
    out = []
    for k in np.nonzero(mass > tol)[0]:
        out.append((float(np.round(grid[k + 1], 12)), float(np.round(mass[k], 12))))
    return out


def nelson_aalen(event_times, entry, exit_, grid):
    """Empirical cumulative hazard on ``grid``: each event adds 1/(number at risk)."""
    event_times = np.sort(np.asarray(event_times, float))
    entry = np.sort(np.asarray(entry, float))
    exit_ = np.sort(np.asarray(exit_, float))
    # at risk at s: entered at or before s and not yet exited before s
    at_risk = np.searchsorted(entry, event_times, side="right") - np.searchsorted(exit_, event_times, side="left")
    incr = np.divide(1.0, at_risk, out=np.zeros(event_times.shape), where=at_risk > 0)
    cum = np.concatenate([[0.0], np.cumsum(incr)])
    return cum[np.searchsorted(event_times, grid, side="right")]


# -- counterexample -----------------------------------------------------------

_QUANTUM = 2.0 ** -40


@dataclass
class CounterexampleReport:
    lam: float
    n_paths: int
    exact_fraction: float
    max_abs_error: float
    f_variance: float
    f_variance_min_bin: float
    variance_threshold: float
    unstopped_atoms: list
    stopped_atoms: list
    flags: list = field(default_factory=list)

    @property
    def g_predictable(self):
        return "G-predictable jump detected" in self.flags

    @property
    def f_inaccessible(self):
        return "F-totally-inaccessible retained" in self.flags

    @property
    def passed(self):
        return self.g_predictable and self.f_inaccessible and not self.stopped_atoms

    def to_json(self):
        return {"lambda": self.lam, "n_paths": self.n_paths, "exact_fraction": self.exact_fraction,
                "max_abs_error": self.max_abs_error, "f_variance": self.f_variance,
                "f_variance_min_bin": self.f_variance_min_bin, "variance_threshold": self.variance_threshold,
                "unstopped_atoms": [list(a) for a in self.unstopped_atoms],
                "stopped_atoms": [list(a) for a in self.stopped_atoms], "flags": list(self.flags),
                "pass": self.passed}


def counterexample_demo(lam, n_paths, seed, n_bins=10):
    """Poisson X with tau the midpoint of its first two jumps.

    Jump times are rounded to multiples of 2^-40 so that ``2*tau - tau1 - tau2``
    is computed without rounding error.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    gen = rng.generator(seed, "counterexample")
    e = gen.exponential(1.0 / lam, (n_paths, 2))
    q = np.maximum(np.round(e / _QUANTUM), 1.0) * _QUANTUM
    tau1 = q[:, 0]
    tau2 = q[:, 0] + q[:, 1]
    tau = 0.5 * (tau1 + tau2)
    pred = 2.0 * tau - tau1
    err = np.abs(pred - tau2)
    exact = float(np.mean(err == 0.0))

    gap = tau2 - tau1
    f_var = float(np.var(gap, ddof=1))
    edges = np.quantile(tau1, np.linspace(0, 1, n_bins + 1))
    which = np.clip(np.searchsorted(edges, tau1, side="right") - 1, 0, n_bins - 1)
    bin_var = min(float(np.var(gap[which == b], ddof=1)) for b in range(n_bins))
    threshold = 0.5 / lam ** 2

    # G-compensator of the second jump on the axis s = t - (2 tau - tau1), watched from tau on
    dt = 0.01 / lam
    rel_grid = dt * np.arange(-50, 51)
    clock_rel = nelson_aalen(tau2 - pred, tau - pred, tau2 - pred, rel_grid)
    unstopped = qlc_atom_scan(lambda g: np.interp(g, rel_grid, clock_rel), dt, grid=rel_grid, tol=0.05)

    # stopped branch: jumps of X^tau see only tau1; at risk on [0, tau]
    abs_grid = dt * np.arange(0, 101)
    clock_stop = nelson_aalen(tau1, np.zeros(n_paths), tau, abs_grid)
    stopped = qlc_atom_scan(lambda g: np.interp(g, abs_grid, clock_stop), dt, grid=abs_grid, tol=0.05)

    flags = []
    if exact == 1.0 and any(abs(t) < 1e-9 and abs(m - 1.0) < 0.05 for t, m in unstopped):
        flags.append("G-predictable jump detected")
    if bin_var > threshold:
        flags.append("F-totally-inaccessible retained")
    return CounterexampleReport(float(lam), int(n_paths), exact, float(err.max()), f_var, bin_var,
                                threshold, unstopped, stopped, flags)


def report_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True)


def standard_battery(marks, horizon):
    """Ten bounded predictable test functions covering both mark types and both sides of tau."""
    from .process_core import TestFunction, TestFunctionBattery

    marks = np.asarray(marks)
    n_m = marks.shape[0]
    top = float(np.max(np.abs(marks)))

    def is_x(m):
        return (m < n_m).astype(float)

    def mx(m):
        return np.where(m < n_m, marks[np.minimum(m, n_m - 1)], 0).astype(float)

    def up(m):
        hit = np.nonzero(marks > 0)[0]
        return np.isin(m, hit).astype(float)

    fns = [
        ("one", lambda s, m: np.ones(len(s)), 1.0),
        ("default_mark", lambda s, m: (m == n_m).astype(float), 1.0),
        ("x_mark_pre_tau", lambda s, m: is_x(m) * (s.h == 0), 1.0),
        ("x_mark_post_tau", lambda s, m: is_x(m) * (s.h == 1), 1.0),
        ("mark_value", lambda s, m: mx(m), top),
        ("time_weighted_default", lambda s, m: (s.t / horizon) * (m == n_m), 1.0),
        ("up_mark_when_positive", lambda s, m: (s.x > 0) * up(m), 1.0),
        ("mark_value_post_tau_early", lambda s, m: (s.t <= horizon / 2) * (s.h == 1) * mx(m), top),
        ("x_mark_before_first_jump", lambda s, m: (s.n_x == 0) * is_x(m), 1.0),
        ("decaying_post_tau", lambda s, m: np.where(s.h == 1, np.exp(-np.clip(s.t - s.tau, 0, None)), 0.0)
         * is_x(m), 1.0),
    ]
    return TestFunctionBattery(tuple(TestFunction(n, f, b) for n, f, b in fns))
