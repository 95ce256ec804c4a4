"""Step processes Z = (X, H): simulation, pathwise integrals, martingale tests.

X lives on the integer lattice ``[-bound, bound]`` with a finite mark set; a
mark that would leave the lattice is suppressed. H jumps once, at the default
time ``tau``. Marks are indexed ``0..n_marks-1`` for X and ``n_marks`` for the
default mark (x1, x2) = (0, 1).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels, rng

NONE_MARK = None


@dataclass(frozen=True)
class MarkedPath:
    """One realization of Z = (X, H) on ``[0, horizon]``."""

    times: tuple
    mark_x: tuple
    mark_h: tuple
    tau: float
    horizon: float
    x0: int = 0

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not (len(self.times) == len(self.mark_x) == len(self.mark_h)):
            raise ValueError("jump fields have different lengths")
        prev = 0.0
        n_default = 0
        for t, mx, mh in zip(self.times, self.mark_x, self.mark_h):
            if not prev < t <= self.horizon:
                raise ValueError(f"jump times must increase strictly inside (0, T]: {t}")
            if (mx is None) == (mh == 0):
                raise ValueError("exactly one of mark_x, mark_h must be set at each jump")
            if mh not in (0, 1):
                raise ValueError("mark_h must be 0 or 1")
            if mh == 1:
                n_default += 1
                if t != self.tau:
                    raise ValueError("the default jump must sit at tau")
            prev = t
        if n_default > 1:
            raise ValueError("H jumps at most once")
        if self.tau <= self.horizon and n_default == 0:
            raise ValueError("tau <= T but the path has no default jump")

    @property
    def jumps(self):
        return list(zip(self.times, self.mark_x, self.mark_h))

    @property
    def n_jumps(self):
        return len(self.times)

    def x_at(self, t):
        """X_t (right-continuous)."""
        x = self.x0
        for s, mx, _ in self.jumps:
            if s > t:
                break
            if mx is not None:
                x += mx
        return x

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "mark_x", "mark_h"])
            for t, mx, mh in self.jumps:
                w.writerow([repr(float(t)), "" if mx is None else int(mx), int(mh)])

    @classmethod
    def from_csv(cls, path, tau, horizon, x0=0):
        times, mxs, mhs = [], [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                times.append(float(row["time"]))
                mxs.append(None if row["mark_x"] == "" else int(row["mark_x"]))
                mhs.append(int(row["mark_h"]))
        return cls(tuple(times), tuple(mxs), tuple(mhs), tau, horizon, x0)


@dataclass
class PathState:
    """Left-limit state of Z at a batch of (path, time) points, as parallel arrays.

    ``x`` holds lattice values, ``n_x`` the number of X-jumps strictly before
    ``t``, ``first`` the mark index of the first X-jump (-1 before it), ``cell`` the
    grid cell of ``t``. ``tau`` may only be read where ``h == 1``.
    """

    t: np.ndarray
    x: np.ndarray
    h: np.ndarray
    n_x: np.ndarray
    first: np.ndarray
    tau: np.ndarray
    cell: np.ndarray
    path: np.ndarray

    def __len__(self):
        return self.t.shape[0]

    @classmethod
    def single(cls, t, x=0, h=0, n_x=0, first=-1, tau=math.inf):
        def arr(v, dtype):
            return np.atleast_1d(np.asarray(v, dtype=dtype))

        t = arr(t, float)
        n = t.shape[0]
        return cls(t, np.broadcast_to(arr(x, np.int64), n).copy(),
                   np.broadcast_to(arr(h, np.int64), n).copy(),
                   np.broadcast_to(arr(n_x, np.int64), n).copy(),
                   np.broadcast_to(arr(first, np.int64), n).copy(),
                   np.broadcast_to(arr(tau, float), n).copy(),
                   np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))


IntensityFn = Callable[[PathState], np.ndarray]


class CompensatorKernel:
    """Predictable random measure nu(dt, dz) = mark_law_t(dz) * clock_rate_t dt.

    The mark space is the X-marks plus the default mark. ``clock_rate`` and
    ``mark_law`` take a :class:`PathState` and return arrays of shape (n,) and
    (n, n_marks + 1). ``table``, when given, is the time-homogeneous X-intensity
    per lattice state, shape (n_x, 2, n_marks), used by the fast simulator.
    """

    def __init__(self, marks, clock_rate=None, mark_law=None, rate_bound=math.inf,
                 intensity=None, table=None, name=""):
        self.marks = tuple(int(m) for m in marks)
        if intensity is None:
            if clock_rate is None or mark_law is None:
                raise ValueError("give either intensity or clock_rate and mark_law")

            def intensity(s, _c=clock_rate, _l=mark_law):
                return np.asarray(_c(s), float)[:, None] * np.asarray(_l(s), float)

        self._intensity = intensity
        self._clock_rate = clock_rate
        self._mark_law = mark_law
        self.rate_bound = float(rate_bound)
        self.table = table
        self.name = name

    @property
    def n_marks(self):
        return len(self.marks)

    def intensity(self, state):
        out = np.asarray(self._intensity(state), dtype=float)
        if out.shape != (len(state), self.n_marks + 1):
            raise ValueError(f"intensity has shape {out.shape}, expected {(len(state), self.n_marks + 1)}")
        return out

    def clock_rate(self, state):
        if self._clock_rate is not None:
            return np.asarray(self._clock_rate(state), float)
        return self.intensity(state).sum(axis=1)

    def mark_law(self, state):
        if self._mark_law is not None:
            return np.asarray(self._mark_law(state), float)
        lam = self.intensity(state)
        tot = lam.sum(axis=1, keepdims=True)
        law = np.zeros_like(lam)
        law[:, 0] = 1.0
        return np.divide(lam, tot, out=law, where=tot > 0)

    def check_bounded(self):
        if not math.isfinite(self.rate_bound) or self.rate_bound < 0:
            raise ValueError(f"kernel {self.name!r} has no finite rate bound (no thinning envelope)")


def lattice(bound):
    return np.arange(-bound, bound + 1, dtype=np.int64)


def poisson_kernel(lam, marks=(-1, 1), probs=None, bound=8, name="poisson"):
    """Compound-Poisson F-kernel of X: intensity lam * probs[m] while x + m stays on the lattice."""
    marks = tuple(int(m) for m in marks)
    probs = np.full(len(marks), 1.0 / len(marks)) if probs is None else np.asarray(probs, float)
    if probs.shape != (len(marks),) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
        raise ValueError("mark probabilities must be nonnegative and sum to 1")
    if lam < 0:
        raise ValueError("intensity must be nonnegative")
    if 0 in marks:
        raise ValueError("zero is not a jump")
    mvals = np.asarray(marks)
    xs = lattice(bound)
    allowed = (np.abs(xs[:, None] + mvals[None, :]) <= bound)
    per_x = lam * probs[None, :] * allowed
    table = np.repeat(per_x[:, None, :], 2, axis=1)

    def intensity(s):
        out = np.zeros((len(s), len(marks) + 1))
        ok = np.abs(s.x[:, None] + mvals[None, :]) <= bound
        out[:, :-1] = lam * probs[None, :] * ok
        return out

    k = CompensatorKernel(marks, intensity=intensity, rate_bound=float(lam), table=table, name=name)
    k.lam = float(lam)
    k.probs = probs
    k.bound = int(bound)
    return k


@dataclass(frozen=True)
class TestFunction:
    """Bounded predictable function W(state, mark_index)."""

    __test__ = False  # not a pytest class

    name: str
    fn: Callable[[PathState, np.ndarray], np.ndarray]
    bound: float

    def __call__(self, state, mark):
        vals = np.broadcast_to(np.asarray(self.fn(state, mark), dtype=float), (len(state),))
        if vals.size and np.max(np.abs(vals)) > self.bound * (1 + 1e-12):
            raise ValueError(f"test function {self.name!r} exceeds its declared bound {self.bound}")
        return vals


@dataclass(frozen=True)
class TestFunctionBattery:
    __test__ = False
    functions: tuple

    def __post_init__(self):
        if not self.functions:
            raise ValueError("battery must not be empty")

    def __iter__(self):
        return iter(self.functions)

    def __len__(self):
        return len(self.functions)


@dataclass
class Segments:
    """Path pieces with constant state, cut at grid points and jump times."""

    path: np.ndarray
    cell: np.ndarray
    a: np.ndarray
    b: np.ndarray
    x: np.ndarray
    h: np.ndarray
    n_x: np.ndarray
    first: np.ndarray
    tau: np.ndarray

    @property
    def length(self):
        return self.b - self.a

    def state(self, rule="left"):
        if rule == "left":
            t = self.a
        elif rule == "midpoint":
            t = 0.5 * (self.a + self.b)
        else:
            raise ValueError(f"unknown quadrature rule {rule!r}")
        return PathState(t, self.x, self.h, self.n_x, self.first, self.tau, self.cell, self.path)


@dataclass
class PathBatch:
    """Many paths in CSR layout; ``mark`` uses the Z mark index."""

    offsets: np.ndarray
    times: np.ndarray
    mark: np.ndarray
    tau: np.ndarray
    horizon: float
    marks: tuple
    bound: int
    x0: int = 0
    _jump_state: PathState | None = field(default=None, repr=False)

    @property
    def n_paths(self):
        return self.tau.shape[0]

    @property
    def n_marks(self):
        return len(self.marks)

    @property
    def jump_path(self):
        return np.repeat(np.arange(self.n_paths), np.diff(self.offsets))

    @property
    def mark_delta(self):
        return np.asarray(self.marks, dtype=np.int64)

    def segments(self, dt=None, backend=None):
        """Cut paths on a uniform grid of step ``dt`` (must divide ``horizon``)."""
        n_cells = 1 if dt is None else n_cells_for(self.horizon, dt)
        step = self.horizon / n_cells
        segs, jumps = kernels.build_segments(self.offsets, self.times, self.mark, self.mark_delta,
                                             self.x0 + self.bound, self.horizon, step, n_cells,
                                             backend=backend)
        path, cell, a, b, xi, h, nx, first = segs
        self._jump_state = PathState(self.times, jumps[1] - self.bound, jumps[2], jumps[3], jumps[4],
                                     self.tau[self.jump_path], jumps[0], self.jump_path)
        return Segments(path, cell, a, b, xi - self.bound, h, nx, first, self.tau[path])

    def jump_state(self, dt=None):
        """Pre-jump (left-limit) state at every jump."""
        self.segments(dt)
        return self._jump_state

    def x_terminal(self):
        xm = np.where(self.mark < self.n_marks, self.mark_delta[np.minimum(self.mark, self.n_marks - 1)], 0)
        return self.x0 + np.bincount(self.jump_path, weights=xm, minlength=self.n_paths).astype(np.int64)

    def x_count(self):
        return np.bincount(self.jump_path[self.mark < self.n_marks], minlength=self.n_paths)

    def path(self, i):
        lo, hi = self.offsets[i], self.offsets[i + 1]
        mx, mh = [], []
        for m in self.mark[lo:hi]:
            if m == self.n_marks:
                mx.append(None)
                mh.append(1)
            else:
                mx.append(int(self.marks[m]))
                mh.append(0)
        return MarkedPath(tuple(float(t) for t in self.times[lo:hi]), tuple(mx), tuple(mh),
                          float(self.tau[i]), float(self.horizon), self.x0)

    @classmethod
    def from_paths(cls, paths: Sequence[MarkedPath], marks, bound):
        marks = tuple(marks)
        offsets = [0]
        times, mk = [], []
        for p in paths:
            for t, mx, mh in p.jumps:
                times.append(t)
                mk.append(len(marks) if mh == 1 else marks.index(mx))
            offsets.append(len(times))
        return cls(np.asarray(offsets, np.int64), np.asarray(times, float), np.asarray(mk, np.int64),
                   np.asarray([p.tau for p in paths], float), float(paths[0].horizon), marks, int(bound),
                   int(paths[0].x0))

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        offs = [parts[0].offsets]
        shift = parts[0].offsets[-1]
        for p in parts[1:]:
            offs.append(p.offsets[1:] + shift)
            shift += p.offsets[-1]
        q = parts[0]
        return cls(np.concatenate(offs), np.concatenate([p.times for p in parts]),
                   np.concatenate([p.mark for p in parts]), np.concatenate([p.tau for p in parts]),
                   q.horizon, q.marks, q.bound, q.x0)


def n_cells_for(horizon, dt):
    if dt <= 0:
        raise ValueError("grid step must be positive")
    n = int(round(horizon / dt))
    if n < 1 or abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError(f"grid step {dt} does not divide the horizon {horizon}")
    return n


# -- simulation ---------------------------------------------------------------

def candidates(gen, n, horizon, envelope):
    """Homogeneous Poisson(envelope) candidate times per path plus thinning uniforms."""
    counts = gen.poisson(envelope * horizon, n) if envelope > 0 else np.zeros(n, np.int64)
    total = int(counts.sum())
    t = gen.uniform(0.0, horizon, total)
    owner = np.repeat(np.arange(n), counts)
    t = t[np.lexsort((t, owner))]
    u = gen.uniform(0.0, 1.0, total)
    off = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=off[1:])
    return off, t, u


def insert_default(off, times, mark, tau, horizon, n_marks):
    """Merge default jumps at ``tau <= horizon`` into CSR X-jump arrays."""
    n = tau.shape[0]
    owner = np.repeat(np.arange(n), np.diff(off))
    hit = np.nonzero(tau <= horizon)[0]
    all_owner = np.concatenate([owner, hit])
    all_t = np.concatenate([times, tau[hit]])
    all_m = np.concatenate([mark, np.full(hit.shape[0], n_marks, np.int64)])
    order = np.lexsort((all_t, all_owner))
    counts = np.bincount(all_owner, minlength=n)
    new_off = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=new_off[1:])
    return new_off, all_t[order], all_m[order]


def thin_callable(gen, kernel, n, horizon, tau, x0, envelope):
    """Lockstep Ogata thinning for kernels without a table (time-dependent callables)."""
    off, ct, cu = candidates(gen, n, horizon, envelope)
    counts = np.diff(off)
    x = np.full(n, x0, dtype=np.int64)
    nx = np.zeros(n, np.int64)
    first = np.full(n, -1, np.int64)
    acc = np.full(ct.shape[0], -1, np.int64)
    marks = np.asarray(kernel.marks)
    for j in range(int(counts.max()) if n else 0):
        act = np.nonzero(counts > j)[0]
        idx = off[act] + j
        t = ct[idx]
        h = (t > tau[act]).astype(np.int64)
        st = PathState(t, x[act], h, nx[act], first[act], tau[act], np.zeros_like(act), act)
        lam = kernel.intensity(st)[:, :-1]
        if np.any(lam.sum(axis=1) > envelope * (1 + 1e-12)):
            raise ValueError("intensity exceeds the thinning envelope")
        cum = np.cumsum(lam, axis=1)
        hit = (cu[idx] * envelope)[:, None] < cum
        ok = hit[:, -1]
        m = np.argmax(hit, axis=1)
        acc[idx[ok]] = m[ok]
        sel = act[ok]
        x[sel] += marks[m[ok]]
        first[sel] = np.where(nx[sel] == 0, m[ok], first[sel])
        nx[sel] += 1
    keep = acc >= 0
    owner = np.repeat(np.arange(n), counts)
    out_off = np.zeros(n + 1, np.int64)
    np.cumsum(np.bincount(owner[keep], minlength=n), out=out_off[1:])
    return out_off, ct[keep], acc[keep]


def _bound_of(kernel):
    b = getattr(kernel, "bound", None)
    if b is None:
        raise ValueError("kernel has no lattice bound")
    return int(b)


def simulate_chunk(gen, kernel, tau_model, horizon, n, x0=0, table=None, cell_dt=None, envelope=None):
    """Simulate ``n`` paths of Z under the kernel (or an explicit intensity table)."""
    bound = _bound_of(kernel)
    if not -bound <= x0 <= bound:
        raise ValueError("x0 outside the lattice")
    if envelope is None:
        kernel.check_bounded()
        envelope = kernel.rate_bound
    needs_x = getattr(tau_model, "needs_x", False)
    tau = np.full(n, math.inf) if needs_x else tau_model.sample(gen, n)
    if table is None and kernel.table is not None:
        table = kernel.table[None, ...]
        cell_dt = horizon
    if table is not None:
        if table.max(initial=0.0) < 0 or np.any(table.sum(axis=-1) > envelope * (1 + 1e-12)):
            raise ValueError("intensity table exceeds the thinning envelope")
        off, ct, cu = candidates(gen, n, horizon, envelope)
        off, t, m = kernels.thin_table(off, ct, cu, tau, x0 + bound, table, cell_dt,
                                       np.asarray(kernel.marks), envelope)
    else:
        off, t, m = thin_callable(gen, kernel, n, horizon, tau, x0, envelope)
    if needs_x:
        tau = tau_model.sample_given_x(gen, off, t, m, kernel)
    off, t, m = insert_default(off, t, m, tau, horizon, kernel.n_marks)
    return PathBatch(off, t, m, tau, float(horizon), kernel.marks, bound, int(x0))


def simulate_batch(kernel, tau_model, horizon, n_paths, seed, label="P", x0=0, **kw):
    """Simulate ``n_paths`` paths in fixed-size chunks, each on its own Philox stream."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")

    def one(i, size):
        return simulate_chunk(rng.generator(seed, label, i), kernel, tau_model, horizon, size, x0=x0, **kw)

    return PathBatch.concat(rng.map_chunks(one, n_paths))


def simulate_path(kernel, tau_model, horizon, seed, x0=0):
    """One path of Z; reproducible for a fixed seed."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    kernel.check_bounded()
    batch = simulate_chunk(rng.generator(seed, "single"), kernel, tau_model, horizon, 1, x0=x0)
    return batch.path(0)


# -- pathwise integrals -------------------------------------------------------

def mu_integrals(batch, W, dt=None):
    """W * mu_T for every path of the batch."""
    js = batch.jump_state(dt)
    vals = W(js, batch.mark) if len(js) else np.zeros(0)
    return np.bincount(batch.jump_path, weights=vals, minlength=batch.n_paths)


def nu_integrals(batch, compensator, W, dt, rule="left", segments=None, intensity=None, pieces=None):
    """W * nu_T for every path, by quadrature on the grid cut at jump times."""
    if pieces is None:
        seg = batch.segments(dt) if segments is None else segments
        st = seg.state(rule)
        lam = compensator.intensity(st) if intensity is None else intensity
        pieces = nu_pieces(seg, st, lam)
    out = np.zeros(batch.n_paths)
    for m, st_m, weight in pieces:
        out += np.bincount(st_m.path, weights=W(st_m, np.full(len(st_m), m)) * weight, minlength=batch.n_paths)
    return out


def nu_pieces(seg, st, lam):
    """Per-mark (state, intensity * length) restricted to nonzero intensity; reusable across W."""
    out = []
    for m in range(lam.shape[1]):
        nz = lam[:, m] != 0
        if np.any(nz):
            out.append((m, _take(st, nz), lam[nz, m] * seg.length[nz]))
    return out


def _take(st, mask):
    return PathState(st.t[mask], st.x[mask], st.h[mask], st.n_x[mask], st.first[mask],
                     st.tau[mask], st.cell[mask], st.path[mask])


def integrate_mu(path: MarkedPath, W, marks=None, bound=None):
    """Sum over the jumps of W(time, pre-jump state, mark)."""
    if path.n_jumps == 0:
        return 0.0
    marks = tuple(sorted({m for m in path.mark_x if m is not None})) if marks is None else tuple(marks)
    bound = bound if bound is not None else max(1, max(abs(path.x_at(t)) for t in path.times) + 1)
    batch = PathBatch.from_paths([path], marks, bound)
    return float(mu_integrals(batch, W)[0])


def integrate_nu(path: MarkedPath, kernel, W, quadrature_dt, rule="left"):
    """Compensator integral of W along the realized state of one path."""
    if quadrature_dt <= 0:
        raise ValueError("quadrature_dt must be positive")
    bound = _bound_of(kernel) if hasattr(kernel, "bound") else None
    batch = PathBatch.from_paths([path], kernel.marks, bound if bound is not None else 64)
    n = max(1, int(math.ceil(path.horizon / quadrature_dt - 1e-9)))
    return float(nu_integrals(batch, kernel, W, path.horizon / n, rule)[0])


# -- martingale test ----------------------------------------------------------

@dataclass
class TestResult:
    __test__ = False
    fn_id: str
    mean: float
    se: float
    passed: bool
    note: str = ""

    def to_record(self):
        rec = {"fn_id": self.fn_id, "mean": self.mean, "se": self.se, "pass": self.passed,
               "estimator": "mc", "tolerance": "3*se"}
        if self.note:
            rec["note"] = self.note
        return rec


@dataclass
class MartingaleReport:
    results: list
    n_paths: int

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def __getitem__(self, fn_id):
        for r in self.results:
            if r.fn_id == fn_id:
                return r
        raise KeyError(fn_id)

    def to_records(self):
        return [r.to_record() for r in self.results]

    def to_json(self):
        return json.dumps(self.to_records(), indent=2, sort_keys=True)


def mean_se(samples):
    samples = np.asarray(samples, float)
    n = samples.shape[0]
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return mean, se


def summarize(name, diffs, k=3.0):
    mean, se = mean_se(diffs)
    if not (math.isfinite(mean) and math.isfinite(se)):
        return TestResult(name, mean, se, False, "divergent variance")
    return TestResult(name, mean, se, abs(mean) <= k * se)


def martingale_test(kernel, tau_model, battery, n_paths, seed, horizon=1.0, compensator=None,
                    quadrature_dt=None, rule="left", x0=0):
    """Check E[W*mu_T - W*nu_T] = 0 for every battery function.

    Paths are drawn from ``kernel`` and ``tau_model``; the tested compensator
    is ``compensator`` (default: ``kernel``).
    """
    if n_paths < 1000:
        raise ValueError("martingale_test needs at least 1000 paths")
    battery = battery if isinstance(battery, TestFunctionBattery) else TestFunctionBattery(tuple(battery))
    comp = kernel if compensator is None else compensator

    def one(i, size):
        b = simulate_chunk(rng.generator(seed, "martingale", i), kernel, tau_model, horizon, size, x0=x0)
        seg = b.segments(quadrature_dt)
        st = seg.state(rule)
        pieces = nu_pieces(seg, st, comp.intensity(st))
        js = b._jump_state
        out = np.empty((len(battery), size))
        for r, W in enumerate(battery):
            mu = np.bincount(b.jump_path, weights=W(js, b.mark) if len(js) else np.zeros(0), minlength=size)
            nu = nu_integrals(b, comp, W, quadrature_dt, rule, pieces=pieces)
            out[r] = mu - nu
        return out

    diffs = np.concatenate(rng.map_chunks(one, n_paths), axis=1)
    return MartingaleReport([summarize(W.name, diffs[r]) for r, W in enumerate(battery)], n_paths)
