"""Compiled inner loops for sweeps, policy replay and value distances.

Values live in CSR form: ``off`` (n_joint + 1) and ``pts`` (total, N), each
node's points sorted lexicographically.  Per-robot successor lists are packed:
robot ``i`` node ``a`` owns ``succ[ptr[node_off[i] + a]:ptr[node_off[i] + a + 1]]``
(local per-robot indices) and the time increment ``dt[node_off[i] + a]``.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange

INV_QUANTUM = 2.0 ** 40
QUANTUM = 2.0 ** -40


@njit(cache=True)
def _insert(buf, cnt, p):
    n = p.shape[0]
    for r in range(cnt):
        dom = True
        for c in range(n):
            if buf[r, c] > p[c]:
                dom = False
                break
        if dom:
            return cnt
    w = 0
    for r in range(cnt):
        keep = False
        for c in range(n):
            if p[c] > buf[r, c]:
                keep = True
                break
        if keep:
            if w != r:
                buf[w, :] = buf[r, :]
            w += 1
    buf[w, :] = p
    return w + 1


@njit(cache=True)
def _lex_less(a, b):
    for c in range(a.shape[0]):
        if a[c] < b[c]:
            return True
        if a[c] > b[c]:
            return False
    return False


@njit(cache=True)
def _lex_sort(buf, cnt):
    tmp = np.empty(buf.shape[1])
    for i in range(1, cnt):
        tmp[:] = buf[i, :]
        j = i - 1
        while j >= 0 and _lex_less(tmp, buf[j]):
            buf[j + 1, :] = buf[j, :]
            j -= 1
        buf[j + 1, :] = tmp


@njit(cache=True)
def _grow(buf):
    out = np.empty((buf.shape[0] * 2, buf.shape[1]))
    out[: buf.shape[0]] = buf
    return out


@njit(cache=True)
def _node_update(j, n_rob, sizes, strides, node_off, ptr, succ, dt, mask, v_off, v_pts, buf, out, delta, idx, start, stop):
    """Frontier of combined successor values at joint node ``j``.

    Writes the sorted result into ``out`` and returns ``(count, n_successors,
    buf, out)``; ``count == 0`` flags a dead end.
    """
    rem = j
    for i in range(n_rob):
        a = rem // strides[i]
        rem -= a * strides[i]
        g = node_off[i] + a
        start[i] = ptr[g]
        stop[i] = ptr[g + 1]
        delta[i] = dt[g]
        if start[i] == stop[i]:
            return 0, 0, buf, out
        idx[i] = start[i]
    cnt = 0
    n_succ = 0
    while True:
        s = 0
        for i in range(n_rob):
            s += succ[idx[i]] * strides[i]
        if mask[s]:
            n_succ += 1
            for r in range(v_off[s], v_off[s + 1]):
                if cnt + 1 >= buf.shape[0]:
                    buf = _grow(buf)
                cnt = _insert(buf, cnt, v_pts[r])
        # odometer over the per-robot successor lists
        k = n_rob - 1
        while k >= 0:
            idx[k] += 1
            if idx[k] < stop[k]:
                break
            idx[k] = start[k]
            k -= 1
        if k < 0:
            break
    if n_succ == 0:
        return 0, 0, buf, out
    m = 0
    p = np.empty(n_rob)
    while out.shape[0] < cnt + 1:
        out = _grow(out)
    for r in range(cnt):
        for c in range(n_rob):
            val = delta[c] + buf[r, c] - delta[c] * buf[r, c]
            p[c] = np.rint(val * INV_QUANTUM) * QUANTUM
        m = _insert(out, m, p)
    _lex_sort(out, m)
    return m, n_succ, buf, out


@njit(cache=True)
def sweep(update, n_rob, sizes, strides, node_off, ptr, succ, dt, mask, v_off, v_pts):
    """One Jacobi sweep; nodes with ``update[j]`` False copy their value.

    Returns ``(off, pts, dead)`` with ``dead[j]`` True for updated nodes
    without any safe successor (they keep their previous value).
    """
    n_joint = update.shape[0]
    new_off = np.empty(n_joint + 1, dtype=np.int64)
    cap = max(v_pts.shape[0], 16)
    new_pts = np.empty((cap, n_rob))
    dead = np.zeros(n_joint, dtype=np.bool_)
    buf = np.empty((64, n_rob))
    out = np.empty((64, n_rob))
    delta = np.empty(n_rob)
    idx = np.empty(n_rob, dtype=np.int64)
    start = np.empty(n_rob, dtype=np.int64)
    stop = np.empty(n_rob, dtype=np.int64)
    w = 0
    for j in range(n_joint):
        new_off[j] = w
        m = 0
        if update[j]:
            m, ns, buf, out = _node_update(j, n_rob, sizes, strides, node_off, ptr, succ, dt, mask,
                                           v_off, v_pts, buf, out, delta, idx, start, stop)
            if m == 0:
                dead[j] = True
        if m > 0:
            while w + m > new_pts.shape[0]:
                new_pts = _grow(new_pts)
            new_pts[w:w + m] = out[:m]
            w += m
        else:
            a, b = v_off[j], v_off[j + 1]
            while w + (b - a) > new_pts.shape[0]:
                new_pts = _grow(new_pts)
            new_pts[w:w + b - a] = v_pts[a:b]
            w += b - a
    new_off[n_joint] = w
    return new_off, new_pts[:w].copy(), dead


@njit(cache=True)
def _count_pass(update, n_rob, sizes, strides, node_off, ptr, succ, dt, mask, v_off, v_pts, lo, hi, counts):
    buf = np.empty((64, n_rob))
    out = np.empty((64, n_rob))
    delta = np.empty(n_rob)
    idx = np.empty(n_rob, dtype=np.int64)
    start = np.empty(n_rob, dtype=np.int64)
    stop = np.empty(n_rob, dtype=np.int64)
    for j in range(lo, hi):
        if update[j]:
            m, ns, buf, out = _node_update(j, n_rob, sizes, strides, node_off, ptr, succ, dt, mask,
                                           v_off, v_pts, buf, out, delta, idx, start, stop)
            counts[j] = m if m > 0 else -(v_off[j + 1] - v_off[j])
        else:
            counts[j] = -(v_off[j + 1] - v_off[j])


@njit(cache=True)
def _write_pass(update, n_rob, sizes, strides, node_off, ptr, succ, dt, mask, v_off, v_pts, lo, hi, new_off, new_pts):
    buf = np.empty((64, n_rob))
    out = np.empty((64, n_rob))
    delta = np.empty(n_rob)
    idx = np.empty(n_rob, dtype=np.int64)
    start = np.empty(n_rob, dtype=np.int64)
    stop = np.empty(n_rob, dtype=np.int64)
    for j in range(lo, hi):
        w = new_off[j]
        m = 0
        if update[j]:
            m, ns, buf, out = _node_update(j, n_rob, sizes, strides, node_off, ptr, succ, dt, mask,
                                           v_off, v_pts, buf, out, delta, idx, start, stop)
        if m > 0:
            new_pts[w:w + m] = out[:m]
        else:
            new_pts[w:w + v_off[j + 1] - v_off[j]] = v_pts[v_off[j]:v_off[j + 1]]


@njit(parallel=True, cache=True)
def sweep_parallel(update, n_rob, sizes, strides, node_off, ptr, succ, dt, mask, v_off, v_pts, n_chunks):
    """Two-pass variant of :func:`sweep` sharded over ``n_chunks`` workers."""
    n_joint = update.shape[0]
    counts = np.empty(n_joint, dtype=np.int64)
    bounds = np.linspace(0, n_joint, n_chunks + 1).astype(np.int64)
    for c in prange(n_chunks):
        _count_pass(update, n_rob, sizes, strides, node_off, ptr, succ, dt, mask, v_off, v_pts,
                    bounds[c], bounds[c + 1], counts)
    dead = counts < 0
    for j in range(n_joint):
        dead[j] = dead[j] and update[j]
    new_off = np.zeros(n_joint + 1, dtype=np.int64)
    for j in range(n_joint):
        new_off[j + 1] = new_off[j] + abs(counts[j])
    new_pts = np.empty((new_off[n_joint], n_rob))
    for c in prange(n_chunks):
        _write_pass(update, n_rob, sizes, strides, node_off, ptr, succ, dt, mask, v_off, v_pts,
                    bounds[c], bounds[c + 1], new_off, new_pts)
    return new_off, new_pts, dead


@njit(cache=True)
def replay(update, n_rob, sizes, strides, node_off, ptr, succ, dt, mask, v_off, v_pts, new_off, new_pts):
    """Policy replay: every (successor, value index) pair whose combined value
    lands exactly on a point of the new frontier.

    Returns CSR ``(pol_off, pol_succ, pol_val)``; ``pol_val`` indexes into the
    node's slice of ``new_pts``.
    """
    n_joint = update.shape[0]
    pol_off = np.zeros(n_joint + 1, dtype=np.int64)
    cap = 1024
    pol_succ = np.empty(cap, dtype=np.int64)
    pol_val = np.empty(cap, dtype=np.int64)
    idx = np.empty(n_rob, dtype=np.int64)
    start = np.empty(n_rob, dtype=np.int64)
    stop = np.empty(n_rob, dtype=np.int64)
    delta = np.empty(n_rob)
    p = np.empty(n_rob)
    w = 0
    for j in range(n_joint):
        pol_off[j] = w
        if not update[j]:
            continue
        rem = j
        empty = False
        for i in range(n_rob):
            a = rem // strides[i]
            rem -= a * strides[i]
            g = node_off[i] + a
            start[i] = ptr[g]
            stop[i] = ptr[g + 1]
            delta[i] = dt[g]
            idx[i] = start[i]
            if start[i] == stop[i]:
                empty = True
        if empty:
            continue
        lo, hi = new_off[j], new_off[j + 1]
        while True:
            s = 0
            for i in range(n_rob):
                s += succ[idx[i]] * strides[i]
            if mask[s]:
                for r in range(v_off[s], v_off[s + 1]):
                    for c in range(n_rob):
                        val = delta[c] + v_pts[r, c] - delta[c] * v_pts[r, c]
                        p[c] = np.rint(val * INV_QUANTUM) * QUANTUM
                    for q in range(lo, hi):
                        same = True
                        for c in range(n_rob):
                            if new_pts[q, c] != p[c]:
                                same = False
                                break
                        if same:
                            if w >= pol_succ.shape[0]:
                                bigger = np.empty(pol_succ.shape[0] * 2, dtype=np.int64)
                                bigger[:w] = pol_succ[:w]
                                pol_succ = bigger
                                bigger = np.empty(pol_val.shape[0] * 2, dtype=np.int64)
                                bigger[:w] = pol_val[:w]
                                pol_val = bigger
                            pol_succ[w] = s
                            pol_val[w] = q - lo
                            w += 1
                            break
            k = n_rob - 1
            while k >= 0:
                idx[k] += 1
                if idx[k] < stop[k]:
                    break
                idx[k] = start[k]
                k -= 1
            if k < 0:
                break
    pol_off[n_joint] = w
    return pol_off, pol_succ[:w].copy(), pol_val[:w].copy()


@njit(cache=True)
def node_hausdorff(nodes, a_off, a_pts, b_off, b_pts):
    """Point-set Hausdorff distance per listed node between two value tables."""
    out = np.zeros(nodes.shape[0])
    n = a_pts.shape[1]
    for k in range(nodes.shape[0]):
        j = nodes[k]
        worst = 0.0
        for side in range(2):
            if side == 0:
                p_lo, p_hi, q_lo, q_hi = a_off[j], a_off[j + 1], b_off[j], b_off[j + 1]
            else:
                p_lo, p_hi, q_lo, q_hi = b_off[j], b_off[j + 1], a_off[j], a_off[j + 1]
            for r in range(p_lo, p_hi):
                best = np.inf
                for q in range(q_lo, q_hi):
                    d = 0.0
                    for c in range(n):
                        if side == 0:
                            e = a_pts[r, c] - b_pts[q, c]
                        else:
                            e = b_pts[r, c] - a_pts[q, c]
                        d += e * e
                    if d < best:
                        best = d
                if best > worst:
                    worst = best
        out[k] = np.sqrt(worst)
    return out


@njit(cache=True)
def node_profile_distance(nodes, a_off, a_pts, b_off, b_pts):
    """Profile Hausdorff distance per listed node (closed form)."""
    out = np.zeros(nodes.shape[0])
    n = a_pts.shape[1]
    for k in range(nodes.shape[0]):
        j = nodes[k]
        worst = 0.0
        for side in range(2):
            if side == 0:
                P, Q = a_pts, b_pts
                p_lo, p_hi, q_lo, q_hi = a_off[j], a_off[j + 1], b_off[j], b_off[j + 1]
            else:
                P, Q = b_pts, a_pts
                p_lo, p_hi, q_lo, q_hi = b_off[j], b_off[j + 1], a_off[j], a_off[j + 1]
            for r in range(p_lo, p_hi):
                best = np.inf
                for q in range(q_lo, q_hi):
                    d = 0.0
                    for c in range(n):
                        e = Q[q, c] - P[r, c]
                        if e > 0:
                            d += e * e
                    if d < best:
                        best = d
                if best > worst:
                    worst = best
        out[k] = np.sqrt(worst)
    return out
