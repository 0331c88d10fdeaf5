"""Numba-compiled hot kernels; twin of _kernels_numpy (same contracts).

All kernels are nopython, nogil and cached, so a thread pool over trees or
images runs them concurrently. Probe arithmetic matches the numpy fallback
operation-for-operation; see _kernels_numpy's module docstring for the
shared conventions.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

BACKEND_NAME = "numba"

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def _probe_one(depths2, bg, u, v, s, du, dv):
    w = depths2.shape[1]
    h = depths2.shape[0]
    uu = int(math.floor(u + du * s + 0.5))
    vv = int(math.floor(v + dv * s + 0.5))
    if 0 <= uu < w and 0 <= vv < h:
        return np.float64(depths2[vv, uu])
    return bg


@njit(**_JIT)
def pair_responses(depths3, img_idx, us, vs, scale, bg, idx, du1, dv1, du2, dv2):
    m = idx.shape[0]
    out = np.empty(m, dtype=np.float64)
    for k in range(m):
        i = idx[k]
        img = depths3[img_idx[i]]
        u = np.float64(us[i])
        v = np.float64(vs[i])
        s = scale[i]
        d1 = _probe_one(img, bg, u, v, s, du1, dv1)
        d2 = _probe_one(img, bg, u, v, s, du2, dv2)
        out[k] = d1 - d2
    return out


@njit(**_JIT)
def node_split(depths3, img_idx, us, vs, scale, bg, targets, row_sq, idx,
               cdu1, cdv1, cdu2, cdv2, q01, min_leaf):
    n = idx.shape[0]
    dim = targets.shape[1]
    nfeat = cdu1.shape[0]
    nthr = q01.shape[1]

    S = np.zeros(dim, dtype=np.float64)
    Q = 0.0
    for k in range(n):
        i = idx[k]
        for d in range(dim):
            S[d] += targets[i, d]
        Q += row_sq[i]
    s2 = 0.0
    for d in range(dim):
        s2 += S[d] * S[d]
    sse_parent = Q - s2 / n

    resp = np.empty(n, dtype=np.float64)
    thr = np.empty(nthr, dtype=np.float64)
    cnt = np.empty(nthr + 1, dtype=np.int64)
    bin_sq = np.empty(nthr + 1, dtype=np.float64)
    bin_sum = np.empty((nthr + 1, dim), dtype=np.float64)
    Sl = np.empty(dim, dtype=np.float64)

    best_f = -1
    best_thr = 0.0
    best_gain = -1.0
    best_nl = 0
    for f in range(nfeat):
        du1 = cdu1[f]
        dv1 = cdv1[f]
        du2 = cdu2[f]
        dv2 = cdv2[f]
        lo = 1e300
        hi = -1e300
        for k in range(n):
            i = idx[k]
            img = depths3[img_idx[i]]
            u = np.float64(us[i])
            v = np.float64(vs[i])
            s = scale[i]
            d1 = _probe_one(img, bg, u, v, s, du1, dv1)
            d2 = _probe_one(img, bg, u, v, s, du2, dv2)
            r = d1 - d2
            resp[k] = r
            if r < lo:
                lo = r
            if r > hi:
                hi = r
        if hi <= lo:
            continue
        for t in range(nthr):
            thr[t] = lo + q01[f, t] * (hi - lo)
        for t in range(nthr + 1):
            cnt[t] = 0
            bin_sq[t] = 0.0
            for d in range(dim):
                bin_sum[t, d] = 0.0
        for k in range(n):
            r = resp[k]
            # bin = count of thresholds <= r (searchsorted side='right')
            a = 0
            b = nthr
            while a < b:
                m = (a + b) >> 1
                if thr[m] <= r:
                    a = m + 1
                else:
                    b = m
            i = idx[k]
            cnt[a] += 1
            bin_sq[a] += row_sq[i]
            for d in range(dim):
                bin_sum[a, d] += targets[i, d]
        cl = 0
        Ql = 0.0
        for d in range(dim):
            Sl[d] = 0.0
        for t in range(nthr):
            cl += cnt[t]
            Ql += bin_sq[t]
            for d in range(dim):
                Sl[d] += bin_sum[t, d]
            nl = cl
            nr = n - cl
            if nl < min_leaf or nr < min_leaf:
                continue
            sl2 = 0.0
            sr2 = 0.0
            for d in range(dim):
                sl2 += Sl[d] * Sl[d]
                sr = S[d] - Sl[d]
                sr2 += sr * sr
            sse_l = Ql - sl2 / nl
            sse_r = (Q - Ql) - sr2 / nr
            gain = sse_parent - sse_l - sse_r
            if gain > best_gain:
                best_f = f
                best_thr = thr[t]
                best_gain = gain
                best_nl = nl
    return best_f, best_thr, best_gain, best_nl


@njit(**_JIT)
def route_forest(depth2, us, vs, scale, bg, tree_off, left, right,
                 du1, dv1, du2, dv2, thr, leaf_mean):
    n = us.shape[0]
    ntree = tree_off.shape[0] - 1
    dim = leaf_mean.shape[1]
    out = np.zeros((n, dim), dtype=np.float64)
    for k in range(n):
        u = np.float64(us[k])
        v = np.float64(vs[k])
        s = scale[k]
        for t in range(ntree):
            node = tree_off[t]
            while left[node] >= 0:
                d1 = _probe_one(depth2, bg, u, v, s, du1[node], dv1[node])
                d2 = _probe_one(depth2, bg, u, v, s, du2[node], dv2[node])
                if d1 - d2 < thr[node]:
                    node = left[node]
                else:
                    node = right[node]
            for d in range(dim):
                out[k, d] += leaf_mean[node, d]
        for d in range(dim):
            out[k, d] /= ntree
    return out


@njit(**_JIT)
def route_tree(depth2, us, vs, scale, bg, root, left, right,
               du1, dv1, du2, dv2, thr):
    n = us.shape[0]
    out = np.empty(n, dtype=np.int64)
    for k in range(n):
        u = np.float64(us[k])
        v = np.float64(vs[k])
        s = scale[k]
        node = root
        while left[node] >= 0:
            d1 = _probe_one(depth2, bg, u, v, s, du1[node], dv1[node])
            d2 = _probe_one(depth2, bg, u, v, s, du2[node], dv2[node])
            if d1 - d2 < thr[node]:
                node = left[node]
            else:
                node = right[node]
        out[k] = node
    return out


@njit(**_JIT)
def edt_sq(mask):
    """Two-pass exact squared EDT (lower envelope of parabolas per row).

    Column pass finds the in-column row distance to the nearest false
    (virtual false rows just outside the border); the row pass minimizes
    (j - j')^2 + g(i, j')^2 with virtual zero columns at both sides. All
    squared distances are exact integers in float64.
    """
    h, w = mask.shape
    g = np.empty((h, w), dtype=np.float64)
    for j in range(w):
        prev = 0.0
        for i in range(h):
            cur = prev + 1.0 if mask[i, j] else 0.0
            g[i, j] = cur
            prev = cur
        prev = 0.0
        for i in range(h - 1, -1, -1):
            cur = prev + 1.0 if mask[i, j] else 0.0
            if cur < g[i, j]:
                g[i, j] = cur
            prev = cur

    out = np.empty((h, w), dtype=np.float64)
    m = w + 2  # columns padded with virtual zeros at j = -1 and j = w
    f = np.empty(m, dtype=np.float64)
    vloc = np.empty(m, dtype=np.int64)
    z = np.empty(m + 1, dtype=np.float64)
    big = 1e300
    for i in range(h):
        f[0] = 0.0
        for j in range(w):
            f[j + 1] = g[i, j] * g[i, j]
        f[m - 1] = 0.0
        k = 0
        vloc[0] = 0
        z[0] = -big
        z[1] = big
        for q in range(1, m):
            fq = f[q] + q * q
            s = 0.0
            while True:
                vk = vloc[k]
                s = (fq - (f[vk] + vk * vk)) / (2.0 * (q - vk))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            vloc[k] = q
            z[k] = s
            z[k + 1] = big
        k = 0
        for q in range(m):
            while z[k + 1] < q:
                k += 1
            vk = vloc[k]
            dq = np.float64(q - vk)
            if 1 <= q <= w:
                out[i, q - 1] = dq * dq + f[vk]
    return out


@njit(**_JIT)
def nearest_joint(points, joints):
    n = points.shape[0]
    k = joints.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    for p in range(n):
        best = 1e300
        bj = 0
        for j in range(k):
            dx = points[p, 0] - joints[j, 0]
            dy = points[p, 1] - joints[j, 1]
            dz = points[p, 2] - joints[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
                bj = j
        idx[p] = bj
        dist[p] = best
    return idx, dist


@njit(**_JIT)
def _trace_loop_impl(mask, out):
    # stops at the first repeated (pixel, backtrack) state: provably
    # terminating for any mask, classic closed loop for well-formed ones
    h, w = mask.shape
    # neighbor order: N NE E SE S SW W NW (clockwise)
    nu = np.array([0, 1, 1, 1, 0, -1, -1, -1], dtype=np.int64)
    nv = np.array([-1, -1, 0, 1, 1, 1, 0, -1], dtype=np.int64)
    dir_of = np.full(9, -1, dtype=np.int64)  # (dv+1)*3 + (du+1) -> dir
    for d in range(8):
        dir_of[(nv[d] + 1) * 3 + (nu[d] + 1)] = d

    su = -1
    sv = -1
    for v in range(h):
        for u in range(w):
            if mask[v, u]:
                su = u
                sv = v
                break
        if su >= 0:
            break
    if su < 0:
        return 0

    cu, cv = su, sv
    bu, bv = su - 1, sv
    seen = np.zeros((h, w, 8), dtype=np.uint8)
    count = 0
    while True:
        bi = dir_of[(bv - cv + 1) * 3 + (bu - cu + 1)]
        if seen[cv, cu, bi]:
            break
        seen[cv, cu, bi] = 1
        out[count, 0] = cu
        out[count, 1] = cv
        count += 1
        found = False
        for k in range(1, 9):
            d = (bi + k) % 8
            tu = cu + nu[d]
            tv = cv + nv[d]
            if 0 <= tu < w and 0 <= tv < h and mask[tv, tu]:
                pd = (bi + k - 1) % 8
                bu = cu + nu[pd]
                bv = cv + nv[pd]
                cu = tu
                cv = tv
                found = True
                break
        if not found:
            break
    return count


def trace_loop(mask):
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    buf = np.empty((8 * mask.size + 8, 2), dtype=np.int64)
    count = _trace_loop_impl(mask, buf)
    if count == 0:
        raise ValueError("trace_loop on empty mask")
    return buf[:count].copy()
