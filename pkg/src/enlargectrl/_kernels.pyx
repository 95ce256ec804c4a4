# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: thinning over tabulated intensities and path/grid segmentation.

Both routines are pure functions of their array inputs. ``_kernels_py`` holds the
numpy fallback with identical outputs.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def thin_table(const cnp.int64_t[::1] cand_offsets,
               const double[::1] cand_t,
               const double[::1] cand_u,
               const double[::1] tau,
               long x0_idx,
               const double[:, :, :, ::1] table,
               double cell_dt,
               const cnp.int64_t[::1] mark_delta,
               double envelope):
    """Accept/reject envelope candidates against state-dependent intensities.

    ``table[k, ix, h, m]`` is the intensity of mark ``m`` on time cell ``k`` in
    state ``(ix, h)``; ``h`` switches to 1 strictly after ``tau``.
    Returns CSR arrays ``(offsets, times, marks)`` of accepted X-jumps.
    """
    cdef Py_ssize_t n = tau.shape[0]
    cdef Py_ssize_t n_cells = table.shape[0]
    cdef Py_ssize_t n_x = table.shape[1]
    cdef Py_ssize_t n_m = table.shape[3]
    cdef Py_ssize_t total = cand_t.shape[0]
    out_off_arr = np.zeros(n + 1, dtype=np.int64)
    out_t_arr = np.empty(total, dtype=np.float64)
    out_m_arr = np.empty(total, dtype=np.int64)
    cdef cnp.int64_t[::1] out_off = out_off_arr
    cdef double[::1] out_t = out_t_arr
    cdef cnp.int64_t[::1] out_m = out_m_arr
    cdef Py_ssize_t p, j, m, k, pos = 0
    cdef long ix
    cdef int h
    cdef double t, thr, cum
    with nogil:
        for p in range(n):
            ix = x0_idx
            for j in range(cand_offsets[p], cand_offsets[p + 1]):
                t = cand_t[j]
                k = <Py_ssize_t>(t / cell_dt)
                if k >= n_cells:
                    k = n_cells - 1
                h = 1 if t > tau[p] else 0
                thr = cand_u[j] * envelope
                cum = 0.0
                for m in range(n_m):
                    cum = cum + table[k, ix, h, m]
                    if thr < cum:
                        out_t[pos] = t
                        out_m[pos] = m
                        pos += 1
                        ix = ix + mark_delta[m]
                        break
            out_off[p + 1] = pos
    return out_off_arr, out_t_arr[:pos].copy(), out_m_arr[:pos].copy()


def build_segments(const cnp.int64_t[::1] offsets,
                   const double[::1] times,
                   const cnp.int64_t[::1] marks,
                   const cnp.int64_t[::1] mark_delta,
                   long x0_idx,
                   double horizon,
                   double dt,
                   long n_cells):
    """Split every path at grid points and jump times.

    Mark index ``len(mark_delta)`` is the default mark. Each segment carries the
    state in force on its interior (the left limit at any interior time).
    Returns ``(segments, jump_states)`` as tuples of arrays.
    """
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t n_jumps = times.shape[0]
    cdef Py_ssize_t n_m = mark_delta.shape[0]
    cdef Py_ssize_t cap = n * n_cells + n_jumps
    s_path_a = np.empty(cap, dtype=np.int64)
    s_cell_a = np.empty(cap, dtype=np.int64)
    s_a_a = np.empty(cap, dtype=np.float64)
    s_b_a = np.empty(cap, dtype=np.float64)
    s_x_a = np.empty(cap, dtype=np.int64)
    s_h_a = np.empty(cap, dtype=np.int64)
    s_nx_a = np.empty(cap, dtype=np.int64)
    s_first_a = np.empty(cap, dtype=np.int64)
    j_cell_a = np.empty(n_jumps, dtype=np.int64)
    j_x_a = np.empty(n_jumps, dtype=np.int64)
    j_h_a = np.empty(n_jumps, dtype=np.int64)
    j_nx_a = np.empty(n_jumps, dtype=np.int64)
    j_first_a = np.empty(n_jumps, dtype=np.int64)
    cdef cnp.int64_t[::1] s_path = s_path_a
    cdef cnp.int64_t[::1] s_cell = s_cell_a
    cdef double[::1] s_a = s_a_a
    cdef double[::1] s_b = s_b_a
    cdef cnp.int64_t[::1] s_x = s_x_a
    cdef cnp.int64_t[::1] s_h = s_h_a
    cdef cnp.int64_t[::1] s_nx = s_nx_a
    cdef cnp.int64_t[::1] s_first = s_first_a
    cdef cnp.int64_t[::1] j_cell = j_cell_a
    cdef cnp.int64_t[::1] j_x = j_x_a
    cdef cnp.int64_t[::1] j_h = j_h_a
    cdef cnp.int64_t[::1] j_nx = j_nx_a
    cdef cnp.int64_t[::1] j_first = j_first_a
    cdef Py_ssize_t p, j, jend, k, pos = 0
    cdef long ix, h, nx, first, mk
    cdef double a, b, gb
    cdef bint emit
    with nogil:
        for p in range(n):
            ix = x0_idx
            h = 0
            nx = 0
            first = -1
            a = 0.0
            k = 0
            j = offsets[p]
            jend = offsets[p + 1]
            while True:
                if k == n_cells - 1:
                    gb = horizon
                else:
                    gb = (k + 1) * dt
                if j < jend and times[j] < gb:
                    b = times[j]
                    emit = True
                else:
                    b = gb
                    emit = False
                s_path[pos] = p
                s_cell[pos] = k
                s_a[pos] = a
                s_b[pos] = b
                s_x[pos] = ix
                s_h[pos] = h
                s_nx[pos] = nx
                s_first[pos] = first
                pos += 1
                a = b
                if emit:
                    mk = marks[j]
                    j_cell[j] = k
                    j_x[j] = ix
                    j_h[j] = h
                    j_nx[j] = nx
                    j_first[j] = first
                    if mk == n_m:
                        h = 1
                    else:
                        ix = ix + mark_delta[mk]
                        if nx == 0:
                            first = mk
                        nx = nx + 1
                    j += 1
                else:
                    if k == n_cells - 1:
                        while j < jend:
                            mk = marks[j]
                            j_cell[j] = k
                            j_x[j] = ix
                            j_h[j] = h
                            j_nx[j] = nx
                            j_first[j] = first
                            if mk == n_m:
                                h = 1
                            else:
                                ix = ix + mark_delta[mk]
                                if nx == 0:
                                    first = mk
                                nx = nx + 1
                            j += 1
                        break
                    k += 1
    segs = (s_path_a[:pos].copy(), s_cell_a[:pos].copy(), s_a_a[:pos].copy(),
            s_b_a[:pos].copy(), s_x_a[:pos].copy(), s_h_a[:pos].copy(),
            s_nx_a[:pos].copy(), s_first_a[:pos].copy())
    jumps = (j_cell_a, j_x_a, j_h_a, j_nx_a, j_first_a)
    return segs, jumps
