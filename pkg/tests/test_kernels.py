"""The compiled core and the numpy fallback must agree bit for bit."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enlargectrl import kernels
from enlargectrl.process_core import candidates, insert_default, poisson_kernel

pytestmark = pytest.mark.skipif(kernels.compiled_impl is None, reason="compiled kernels not built")


def _both(fn, *args):
    a = fn(*args, backend="python")
    b = fn(*args, backend="cython")
    return a, b


def _assert_same(a, b):
    if isinstance(a, tuple):
        assert len(a) == len(b)
        for x, y in zip(a, b):
            _assert_same(x, y)
    else:
        assert a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)


def _thin_case(seed, n, dt, with_ties):
    gen = np.random.default_rng(seed)
    kern = poisson_kernel(3.0, (-1, 1, 2), (0.3, 0.5, 0.2), bound=3)
    n_cells = int(round(1.0 / dt))
    # time-varying table: scale the lattice table per cell
    scale = gen.uniform(0.2, 1.0, n_cells)[:, None, None, None]
    table = kern.table[None] * scale
    off, ct, cu = candidates(gen, n, 1.0, 3.0)
    tau = gen.exponential(1.0, n)
    if with_ties and ct.size:
        # candidates on grid points, tau equal to a candidate, candidates at T
        pick = gen.choice(ct.size, size=max(1, ct.size // 5), replace=False)
        ct[pick] = np.round(ct[pick] / dt) * dt
        ct[pick[: len(pick) // 3]] = 1.0
        owner = np.repeat(np.arange(n), np.diff(off))
        for p in np.unique(owner[pick])[:5]:
            tau[p] = ct[off[p]]
        ct = ct[np.lexsort((ct, owner))]
    return off, ct, cu, tau, kern, table, dt


@pytest.mark.parametrize("with_ties", [False, True])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_thin_table_identical(seed, with_ties):
    off, ct, cu, tau, kern, table, dt = _thin_case(seed, 500, 0.05, with_ties)
    a, b = _both(kernels.thin_table, off, ct, cu, tau, kern.bound, table, dt, np.asarray(kern.marks), 3.0)
    _assert_same(a, b)


def _segment_case(seed, n, dt, with_ties):
    gen = np.random.default_rng(seed)
    kern = poisson_kernel(4.0, (-1, 1), bound=2)
    off, ct, cu = candidates(gen, n, 1.0, 4.0)
    tau = gen.exponential(1.5, n)
    if with_ties:
        ct = np.round(ct / dt) * dt
        ct[::7] = 1.0
        tau[::3] = 1.0
    # strictly increasing times per path
    owner = np.repeat(np.arange(n), np.diff(off))
    keep = np.ones(ct.size, bool)
    keep[1:] = ~((owner[1:] == owner[:-1]) & (ct[1:] <= ct[:-1]))
    keep &= ct > 0
    ct, owner = ct[keep], owner[keep]
    marks = gen.integers(0, 2, ct.size)
    off = np.zeros(n + 1, np.int64)
    np.cumsum(np.bincount(owner, minlength=n), out=off[1:])
    # defaults must not coincide with an X-jump
    t_of = {(o, t) for o, t in zip(owner, ct)}
    tau = np.array([tau[i] if (i, tau[i]) not in t_of else tau[i] + 1e-7 for i in range(n)])
    return insert_default(off, ct, marks, tau, 1.0, 2), kern


@pytest.mark.parametrize("dt", [1.0, 0.1, 0.01])
@pytest.mark.parametrize("with_ties", [False, True])
def test_build_segments_identical(dt, with_ties):
    (off, t, m), kern = _segment_case(3, 400, dt, with_ties)
    n_cells = int(round(1.0 / dt))
    a, b = _both(kernels.build_segments, off, t, m, np.asarray(kern.marks), kern.bound, 1.0, dt, n_cells)
    _assert_same(a, b)


def test_segments_tie_goes_to_grid_first():
    # a jump exactly on a grid point: the segment ending there carries the pre-jump state
    off = np.array([0, 1]); t = np.array([0.5]); m = np.array([1])
    (path, cell, a, b, x, h, nx, first), jumps = kernels.build_segments(
        off, t, m, np.array([-1, 1]), 2, 1.0, 0.5, 2, backend="python")
    np.testing.assert_array_equal(a, [0.0, 0.5, 0.5])
    np.testing.assert_array_equal(b, [0.5, 0.5, 1.0])
    np.testing.assert_array_equal(x, [2, 2, 3])
    assert jumps[0][0] == 1  # the jump sits in the second cell


def test_jump_at_horizon_opens_no_segment():
    off = np.array([0, 1]); t = np.array([1.0]); m = np.array([0])
    segs, jumps = kernels.build_segments(off, t, m, np.array([-1, 1]), 2, 1.0, 0.5, 2, backend="python")
    assert segs[0].shape[0] == 2
    assert segs[3][-1] == 1.0
    assert jumps[0][0] == 1


def test_empty_inputs_identical():
    off = np.zeros(4, np.int64)
    empty = np.zeros(0)
    kern = poisson_kernel(1.0, bound=2)
    a, b = _both(kernels.thin_table, off, empty, empty, np.full(3, np.inf), 2, kern.table[None], 1.0,
                 np.asarray(kern.marks), 1.0)
    _assert_same(a, b)
    a, b = _both(kernels.build_segments, off, empty, np.zeros(0, np.int64), np.asarray(kern.marks), 2, 1.0, 0.25, 4)
    _assert_same(a, b)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 60), cells=st.sampled_from([1, 2, 5, 8, 20]))
def test_random_batches_identical(seed, n, cells):
    dt = 1.0 / cells
    off, ct, cu, tau, kern, table, _ = _thin_case(seed, n, dt, with_ties=seed % 2 == 0)
    a, b = _both(kernels.thin_table, off, ct, cu, tau, kern.bound, table, dt, np.asarray(kern.marks), 3.0)
    _assert_same(a, b)
    off2, t2, m2 = insert_default(a[0], a[1], a[2], tau, 1.0, kern.n_marks)
    a, b = _both(kernels.build_segments, off2, t2, m2, np.asarray(kern.marks), kern.bound, 1.0, dt, cells)
    _assert_same(a, b)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.build_segments(np.zeros(1, np.int64), np.zeros(0), np.zeros(0, np.int64), np.array([1]),
                               0, 1.0, 1.0, 1, backend="fortran")


_SNIPPET = """
import hashlib
from enlargectrl import kernels
from enlargectrl.enlargement import CoxTime
from enlargectrl.process_core import poisson_kernel, simulate_batch
b = simulate_batch(poisson_kernel(2.0), CoxTime(0.5), 1.0, 3000, 7)
s = b.segments(0.01)
h = hashlib.sha256()
for a in (b.offsets, b.times, b.mark, s.a, s.b, s.x, s.h, s.n_x, s.first, s.cell):
    h.update(a.tobytes())
print(kernels.BACKEND, h.hexdigest())
"""


def test_backends_end_to_end_via_env():
    import os
    import subprocess
    import sys

    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, ENLARGECTRL_PURE_PYTHON=flag)
        res = subprocess.run([sys.executable, "-c", _SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, digest = res.stdout.split()
        out[backend] = digest
    assert set(out) == {"cython", "python"}
    assert out["cython"] == out["python"]


def test_benchmark_script_runs(tmp_path):
    import json
    import pathlib
    import subprocess
    import sys

    script = pathlib.Path(__file__).parent.parent / "benchmarks" / "bench_kernels.py"
    out = tmp_path / "bench.json"
    subprocess.run([sys.executable, str(script), "--paths", "2000", "--repeat", "1", "--json", str(out)],
                   check=True, capture_output=True)
    res = json.loads(out.read_text())["results"]
    assert set(res) == {"thin_table", "build_segments"}
