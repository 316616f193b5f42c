"""Compiled selection stages and per-layer top-down propagation kernels.

Gating is propagated seed by seed: every seed's entries are processed in a
private scratch buffer, so a seed's trace never depends on which other
seeds run alongside it. Emitted values are floored onto a 2**-40 grid,
which makes sums over any set of seeds exact in floating point and keeps
layer mass from growing through rounding.
"""

import numpy as np
from numba import njit

QUANTUM_EXP = 40
_SCALE = float(2**QUANTUM_EXP)


@njit(cache=True)
def quantize(v):
    return np.floor(v * _SCALE) / _SCALE


@njit(cache=True)
def stage1(ps):
    """Indices with ps >= mean of the strictly positive entries (ascending)."""
    total = 0.0
    count = 0
    top = -np.inf
    for i in range(ps.shape[0]):
        v = ps[i]
        if v > 0.0:
            total += v
            count += 1
            if v > top:
                top = v
    out = np.empty(count, dtype=np.int64)
    if count == 0:
        return out
    # capping at the max keeps all-equal fields whole despite rounding in the mean
    thr = min(total / count, top)
    n = 0
    for i in range(ps.shape[0]):
        v = ps[i]
        if v > 0.0 and v >= thr:
            out[n] = i
            n += 1
    return out[:n]


@njit(cache=True)
def stage2_components(ys, xs):
    """4-connected component label per entry; labels follow raster order of first cell."""
    n = ys.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels, 0
    y0 = ys.min()
    x0 = xs.min()
    gh = ys.max() - y0 + 1
    gw = xs.max() - x0 + 1
    occ = np.zeros((gh, gw), dtype=np.bool_)
    for i in range(n):
        occ[ys[i] - y0, xs[i] - x0] = True
    grid = np.full((gh, gw), -1, dtype=np.int64)
    stack = np.empty(gh * gw, dtype=np.int64)
    ncomp = 0
    for r in range(gh):
        for c in range(gw):
            if not occ[r, c] or grid[r, c] >= 0:
                continue
            grid[r, c] = ncomp
            top = 0
            stack[top] = r * gw + c
            top += 1
            while top > 0:
                top -= 1
                cell = stack[top]
                cr = cell // gw
                cc = cell % gw
                for k in range(4):
                    nr = cr + (-1 if k == 0 else (1 if k == 1 else 0))
                    nc = cc + (-1 if k == 2 else (1 if k == 3 else 0))
                    if 0 <= nr < gh and 0 <= nc < gw and occ[nr, nc] and grid[nr, nc] < 0:
                        grid[nr, nc] = ncomp
                        stack[top] = nr * gw + nc
                        top += 1
            ncomp += 1
    for i in range(n):
        labels[i] = grid[ys[i] - y0, xs[i] - x0]
    return labels, ncomp


@njit(cache=True)
def stage2_select(ps, ys, xs, winners, alpha):
    """Winners of the best-scoring spatial component (subset of ``winners``, ascending)."""
    m = winners.shape[0]
    wy = np.empty(m, dtype=np.int64)
    wx = np.empty(m, dtype=np.int64)
    for j in range(m):
        wy[j] = ys[winners[j]]
        wx[j] = xs[winners[j]]
    labels, ncomp = stage2_components(wy, wx)
    sizes = np.zeros(ncomp, dtype=np.int64)
    sums = np.zeros(ncomp)
    total = 0.0
    for j in range(m):
        v = ps[winners[j]]
        sizes[labels[j]] += 1
        sums[labels[j]] += v
        total += v
    best = 0
    best_score = -np.inf
    best_sum = -np.inf
    for c in range(ncomp):
        score = alpha * sizes[c] / m + (1.0 - alpha) * sums[c] / total
        if score > best_score or (score == best_score and sums[c] > best_sum):
            best = c
            best_score = score
            best_sum = sums[c]
    out = np.empty(sizes[best], dtype=np.int64)
    n = 0
    for j in range(m):
        if labels[j] == best:
            out[n] = winners[j]
            n += 1
    return out


@njit(cache=True)
def stage2_wta(ps, winners):
    best = winners[0]
    for j in range(1, winners.shape[0]):
        if ps[winners[j]] > ps[best]:
            best = winners[j]
    out = np.empty(1, dtype=np.int64)
    out[0] = best
    return out


@njit(cache=True)
def stage3_weights(ps, selected):
    total = 0.0
    for j in range(selected.shape[0]):
        total += ps[selected[j]]
    q = np.empty(selected.shape[0])
    for j in range(selected.shape[0]):
        q[j] = ps[selected[j]] / total
    return q


@njit(cache=True)
def node_psfield(h, w, co, oy, ox, stride, pad, dil):
    """PS activities of output node (co, oy, ox): w * h over in-bounds kernel taps."""
    cin, hh, ww = h.shape
    k = w.shape[2]
    n = cin * k * k
    ps = np.empty(n)
    flat = np.empty(n, dtype=np.int64)
    ys = np.empty(n, dtype=np.int64)
    xs = np.empty(n, dtype=np.int64)
    m = 0
    for ci in range(cin):
        for ky in range(k):
            iy = oy * stride - pad + ky * dil
            if iy < 0 or iy >= hh:
                continue
            for kx in range(k):
                ix = ox * stride - pad + kx * dil
                if ix < 0 or ix >= ww:
                    continue
                ps[m] = w[co, ci, ky, kx] * h[ci, iy, ix]
                flat[m] = (ci * hh + iy) * ww + ix
                ys[m] = iy
                xs[m] = ix
                m += 1
    return ps[:m], flat[:m], ys[:m], xs[:m]


@njit(cache=True)
def node_selection(h, w, co, oy, ox, stride, pad, dil, alpha, collapsed):
    ps, flat, ys, xs = node_psfield(h, w, co, oy, ox, stride, pad, dil)
    winners = stage1(ps)
    if winners.shape[0] == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    if collapsed:
        sel = stage2_wta(ps, winners)
    else:
        sel = stage2_select(ps, ys, xs, winners, alpha)
    q = stage3_weights(ps, sel)
    out = np.empty(sel.shape[0], dtype=np.int64)
    for j in range(sel.shape[0]):
        out[j] = flat[sel[j]]
    return out, q


@njit(cache=True)
def _grow_i(a, n):
    b = np.empty(max(2 * a.shape[0], n), dtype=a.dtype)
    b[: a.shape[0]] = a
    return b


@njit(cache=True)
def _grow_f(a, n):
    b = np.empty(max(2 * a.shape[0], n))
    b[: a.shape[0]] = a
    return b


@njit(cache=True)
def _flush(scratch, mark, touched, nt, seed, o_seed, o_idx, o_val, no):
    """Emit one seed's accumulated values in index order and reset the scratch."""
    order = np.sort(touched[:nt])
    if no + nt > o_idx.shape[0]:
        o_seed = _grow_i(o_seed, no + nt)
        o_idx = _grow_i(o_idx, no + nt)
        o_val = _grow_f(o_val, no + nt)
    for t in range(nt):
        i = order[t]
        v = quantize(scratch[i])
        if v > 0.0:
            o_seed[no] = seed
            o_idx[no] = i
            o_val[no] = v
            no += 1
        scratch[i] = 0.0
        mark[i] = False
    return o_seed, o_idx, o_val, no


@njit(cache=True)
def conv_td(seed, idx, val, h, w, stride, pad, dil, alpha, collapsed, out_hw):
    """Propagate (seed, idx, val) gating at a conv output to its input.

    Entries must be grouped by seed. Returns (seed, idx, val) at the layer
    input, sorted by seed then index. Node selections are cached, so nodes
    shared by several seeds are solved once.
    """
    cin, hh, ww = h.shape
    cout = w.shape[0]
    ho, wo = out_hw
    nodes = cout * ho * wo
    c_start = np.full(nodes, -1, dtype=np.int64)
    c_len = np.zeros(nodes, dtype=np.int64)
    c_idx = np.empty(1024, dtype=np.int64)
    c_q = np.empty(1024)
    c_n = 0

    size = cin * hh * ww
    scratch = np.zeros(size)
    mark = np.zeros(size, dtype=np.bool_)
    touched = np.empty(size, dtype=np.int64)
    nt = 0
    o_seed = np.empty(max(16, idx.shape[0]), dtype=np.int64)
    o_idx = np.empty(max(16, idx.shape[0]), dtype=np.int64)
    o_val = np.empty(max(16, idx.shape[0]))
    no = 0

    n = idx.shape[0]
    for e in range(n):
        node = idx[e]
        if c_start[node] < 0:
            co = node // (ho * wo)
            rem = node % (ho * wo)
            sel, q = node_selection(h, w, co, rem // wo, rem % wo, stride, pad, dil, alpha, collapsed)
            if c_n + sel.shape[0] > c_idx.shape[0]:
                c_idx = _grow_i(c_idx, c_n + sel.shape[0])
                c_q = _grow_f(c_q, c_n + sel.shape[0])
            c_idx[c_n : c_n + sel.shape[0]] = sel
            c_q[c_n : c_n + sel.shape[0]] = q
            c_start[node] = c_n
            c_len[node] = sel.shape[0]
            c_n += sel.shape[0]
        g = val[e]
        for j in range(c_start[node], c_start[node] + c_len[node]):
            i = c_idx[j]
            if not mark[i]:
                mark[i] = True
                touched[nt] = i
                nt += 1
            scratch[i] += g * c_q[j]
        if e == n - 1 or seed[e + 1] != seed[e]:
            o_seed, o_idx, o_val, no = _flush(scratch, mark, touched, nt, seed[e], o_seed, o_idx, o_val, no)
            nt = 0
    return o_seed[:no], o_idx[:no], o_val[:no]


@njit(cache=True)
def pool_td(seed, idx, val, argmax, in_hw):
    """Route each gated pool output to its stored argmax input, seed by seed."""
    c, ho, wo = argmax.shape
    hh, ww = in_hw
    size = c * hh * ww
    scratch = np.zeros(size)
    mark = np.zeros(size, dtype=np.bool_)
    touched = np.empty(size, dtype=np.int64)
    nt = 0
    o_seed = np.empty(max(16, idx.shape[0]), dtype=np.int64)
    o_idx = np.empty(max(16, idx.shape[0]), dtype=np.int64)
    o_val = np.empty(max(16, idx.shape[0]))
    no = 0
    n = idx.shape[0]
    for e in range(n):
        node = idx[e]
        ch = node // (ho * wo)
        rem = node % (ho * wo)
        i = ch * hh * ww + argmax[ch, rem // wo, rem % wo]
        if not mark[i]:
            mark[i] = True
            touched[nt] = i
            nt += 1
        scratch[i] += val[e]
        if e == n - 1 or seed[e + 1] != seed[e]:
            o_seed, o_idx, o_val, no = _flush(scratch, mark, touched, nt, seed[e], o_seed, o_idx, o_val, no)
            nt = 0
    return o_seed[:no], o_idx[:no], o_val[:no]
