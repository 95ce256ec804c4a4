"""Numpy fallback for the compiled kernels in ``_kernels.pyx``.

Outputs are bit-identical to the compiled versions; see ``tests/test_kernels.py``.
"""
import numpy as np


def thin_table(cand_offsets, cand_t, cand_u, tau, x0_idx, table, cell_dt, mark_delta, envelope):
    n = tau.shape[0]
    n_cells = table.shape[0]
    counts = np.diff(cand_offsets)
    # sequential cumulative sum, same summation order as the compiled loop
    cum_table = np.cumsum(table, axis=-1)
    accepted_mark = np.full(cand_t.shape[0], -1, dtype=np.int64)
    ix = np.full(n, x0_idx, dtype=np.int64)
    n_rounds = int(counts.max()) if n else 0
    for j in range(n_rounds):
        active = np.nonzero(counts > j)[0]
        idx = cand_offsets[active] + j
        t = cand_t[idx]
        k = np.minimum((t / cell_dt).astype(np.int64), n_cells - 1)
        h = (t > tau[active]).astype(np.int64)
        cum = cum_table[k, ix[active], h]
        thr = cand_u[idx] * envelope
        hit = thr[:, None] < cum
        ok = hit[:, -1]
        m = np.argmax(hit, axis=1)
        accepted_mark[idx[ok]] = m[ok]
        ix[active[ok]] += mark_delta[m[ok]]
    keep = accepted_mark >= 0
    path_of = np.repeat(np.arange(n), counts)
    out_counts = np.bincount(path_of[keep], minlength=n)
    out_off = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(out_counts, out=out_off[1:])
    return out_off, cand_t[keep].copy(), accepted_mark[keep].copy()


def build_segments(offsets, times, marks, mark_delta, x0_idx, horizon, dt, n_cells):
    n = offsets.shape[0] - 1
    n_jumps = times.shape[0]
    n_m = mark_delta.shape[0]
    jump_path = np.repeat(np.arange(n, dtype=np.int64), np.diff(offsets))

    grid = (np.arange(n_cells, dtype=np.float64) + 1.0) * dt
    grid[-1] = horizon
    ev_path = np.concatenate([np.repeat(np.arange(n, dtype=np.int64), n_cells), jump_path])
    ev_time = np.concatenate([np.tile(grid, n), times])
    ev_kind = np.concatenate([np.zeros(n * n_cells, dtype=np.int64), np.ones(n_jumps, dtype=np.int64)])
    ev_ref = np.concatenate([np.arange(n * n_cells, dtype=np.int64), np.arange(n_jumps, dtype=np.int64)])
    order = np.lexsort((ev_kind, ev_time, ev_path))
    ev_path, ev_time, ev_kind, ev_ref = ev_path[order], ev_time[order], ev_kind[order], ev_ref[order]

    is_jump = ev_kind == 1
    ev_mark = np.where(is_jump, marks[np.where(is_jump, ev_ref, 0)] if n_jumps else 0, -1)
    is_default = ev_mark == n_m
    is_x = is_jump & ~is_default
    delta = np.where(is_x, mark_delta[np.where(is_x, ev_mark, 0)], 0)

    n_ev = ev_path.shape[0]
    start = np.searchsorted(ev_path, np.arange(n))

    def exclusive(v):
        c = np.cumsum(v) - v
        return c - c[start][ev_path]

    x = x0_idx + exclusive(delta)
    h = (exclusive(is_default.astype(np.int64)) > 0).astype(np.int64)
    nx = exclusive(is_x.astype(np.int64))
    cell = exclusive((~is_jump).astype(np.int64))
    first_of_path = np.full(n, -1, dtype=np.int64)
    first_ev = np.nonzero(is_x & (nx == 0))[0]
    first_of_path[ev_path[first_ev]] = ev_mark[first_ev]
    first = np.where(nx > 0, first_of_path[ev_path], -1)

    prev_time = np.empty(n_ev)
    prev_time[1:] = ev_time[:-1]
    prev_time[start] = 0.0

    # a jump at the horizon follows the final grid point and opens no segment
    emits = ~(is_jump & (cell == n_cells))
    segs = (ev_path[emits], np.minimum(cell[emits], n_cells - 1), prev_time[emits],
            ev_time[emits], x[emits], h[emits], nx[emits], first[emits])

    j_cell = np.empty(n_jumps, dtype=np.int64)
    j_x = np.empty(n_jumps, dtype=np.int64)
    j_h = np.empty(n_jumps, dtype=np.int64)
    j_nx = np.empty(n_jumps, dtype=np.int64)
    j_first = np.empty(n_jumps, dtype=np.int64)
    refs = ev_ref[is_jump]
    j_cell[refs] = np.minimum(cell[is_jump], n_cells - 1)
    j_x[refs] = x[is_jump]
    j_h[refs] = h[is_jump]
    j_nx[refs] = nx[is_jump]
    j_first[refs] = first[is_jump]
    return segs, (j_cell, j_x, j_h, j_nx, j_first)
