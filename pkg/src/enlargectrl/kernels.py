"""Backend selection for the hot loops.

The compiled extension is used when it imports cleanly; set
``ENLARGECTRL_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

python_impl = _kernels_py
compiled_impl = None
try:
    from . import _kernels as compiled_impl
except ImportError:  # extension not built
    compiled_impl = None

if compiled_impl is not None and os.environ.get("ENLARGECTRL_PURE_PYTHON", "") not in ("1", "true"):
    impl = compiled_impl
    BACKEND = "cython"
else:
    impl = python_impl
    BACKEND = "python"


def thin_table(cand_offsets, cand_t, cand_u, tau, x0_idx, table, cell_dt, mark_delta, envelope, backend=None):
    """Run envelope thinning; ``table`` has shape (n_cells, n_x, 2, n_marks)."""
    mod = _pick(backend)
    return mod.thin_table(
        np.ascontiguousarray(cand_offsets, dtype=np.int64),
        np.ascontiguousarray(cand_t, dtype=np.float64),
        np.ascontiguousarray(cand_u, dtype=np.float64),
        np.ascontiguousarray(tau, dtype=np.float64),
        int(x0_idx),
        np.ascontiguousarray(table, dtype=np.float64),
        float(cell_dt),
        np.ascontiguousarray(mark_delta, dtype=np.int64),
        float(envelope),
    )


def build_segments(offsets, times, marks, mark_delta, x0_idx, horizon, dt, n_cells, backend=None):
    mod = _pick(backend)
    return mod.build_segments(
        np.ascontiguousarray(offsets, dtype=np.int64),
        np.ascontiguousarray(times, dtype=np.float64),
        np.ascontiguousarray(marks, dtype=np.int64),
        np.ascontiguousarray(mark_delta, dtype=np.int64),
        int(x0_idx),
        float(horizon),
        float(dt),
        int(n_cells),
    )


def _pick(backend):
    if backend is None:
        return impl
    if backend == "python":
        return python_impl
    if backend == "cython":
        if compiled_impl is None:
            raise RuntimeError("compiled kernels are not available")
        return compiled_impl
    raise ValueError(f"unknown backend {backend!r}")
