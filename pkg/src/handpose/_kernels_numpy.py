"""Pure numpy/scipy implementations of the hot kernels.

Fallback path selected with HANDPOSE_BACKEND=numpy (or automatically when
numba is unavailable). Every function here has a numba twin in
_kernels_numba with the same signature and the same arithmetic, evaluated
in the same order wherever bit-level agreement is feasible.

Shared probe convention: a feature pair (du1, dv1, du2, dv2) is stored in
mm; the probe pixel for offset (du, dv) at reference (u, v) with per-pixel
scale s is (floor(u + du*s + 0.5), floor(v + dv*s + 0.5)). Out-of-bounds
probes read the background sentinel; background pixels inside the grid
already hold the sentinel.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

BACKEND_NAME = "numpy"


def _probe(depths2, us, vs, scale, du, dv, bg):
    """Depth values at offset probes for one offset, one image. float64."""
    h, w = depths2.shape
    uu = np.floor(us + du * scale + 0.5).astype(np.int64)
    vv = np.floor(vs + dv * scale + 0.5).astype(np.int64)
    ok = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
    uc = np.clip(uu, 0, w - 1)
    vc = np.clip(vv, 0, h - 1)
    vals = depths2[vc, uc].astype(np.float64)
    vals[~ok] = bg
    return vals


def _probe_multi(depths3, img, us, vs, scale, du, dv, bg):
    """Same as _probe but across a stack of images."""
    _, h, w = depths3.shape
    uu = np.floor(us + du * scale + 0.5).astype(np.int64)
    vv = np.floor(vs + dv * scale + 0.5).astype(np.int64)
    ok = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
    uc = np.clip(uu, 0, w - 1)
    vc = np.clip(vv, 0, h - 1)
    vals = depths3[img, vc, uc].astype(np.float64)
    vals[~ok] = bg
    return vals


def pair_responses(depths3, img_idx, us, vs, scale, bg, idx, du1, dv1, du2, dv2):
    """Depth-difference responses for samples idx under one offset pair."""
    im = img_idx[idx]
    u = us[idx].astype(np.float64)
    v = vs[idx].astype(np.float64)
    s = scale[idx]
    d1 = _probe_multi(depths3, im, u, v, s, du1, dv1, bg)
    d2 = _probe_multi(depths3, im, u, v, s, du2, dv2, bg)
    return d1 - d2


def node_split(depths3, img_idx, us, vs, scale, bg, targets, row_sq, idx,
               cdu1, cdv1, cdu2, cdv2, q01, min_leaf):
    """Best variance-reduction split over candidate pairs x thresholds.

    q01 holds sorted uniform(0,1) draws, row f mapping to thresholds
    lo_f + q*(hi_f - lo_f). Returns (feature, threshold, gain, n_left);
    feature is -1 when no candidate satisfies the min_leaf constraint.
    """
    n = idx.shape[0]
    dim = targets.shape[1]
    tgt = targets[idx]
    rsq = row_sq[idx]
    S = tgt.sum(axis=0)
    Q = rsq.sum()
    sse_parent = Q - (S * S).sum() / n

    im = img_idx[idx]
    u = us[idx].astype(np.float64)
    v = vs[idx].astype(np.float64)
    s = scale[idx]

    nfeat = cdu1.shape[0]
    nthr = q01.shape[1]
    best_f, best_thr, best_gain, best_nl = -1, 0.0, -1.0, 0
    for f in range(nfeat):
        d1 = _probe_multi(depths3, im, u, v, s, cdu1[f], cdv1[f], bg)
        d2 = _probe_multi(depths3, im, u, v, s, cdu2[f], cdv2[f], bg)
        r = d1 - d2
        lo = r.min()
        hi = r.max()
        if hi <= lo:
            continue
        thr = lo + q01[f] * (hi - lo)
        bins = np.searchsorted(thr, r, side="right")
        cnt = np.bincount(bins, minlength=nthr + 1)
        bin_sq = np.bincount(bins, weights=rsq, minlength=nthr + 1)
        bin_sum = np.empty((nthr + 1, dim))
        for d in range(dim):
            bin_sum[:, d] = np.bincount(bins, weights=tgt[:, d], minlength=nthr + 1)

        cl = np.cumsum(cnt)[:nthr]
        Ql = np.cumsum(bin_sq)[:nthr]
        Sl = np.cumsum(bin_sum, axis=0)[:nthr]
        nl = cl
        nr = n - cl
        valid = (nl >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        nl_safe = np.where(valid, nl, 1)
        nr_safe = np.where(valid, nr, 1)
        sse_l = Ql - (Sl * Sl).sum(axis=1) / nl_safe
        Sr = S[None, :] - Sl
        sse_r = (Q - Ql) - (Sr * Sr).sum(axis=1) / nr_safe
        gain = np.where(valid, sse_parent - sse_l - sse_r, -np.inf)
        t = int(np.argmax(gain))
        if gain[t] > best_gain:
            best_f = f
            best_thr = float(thr[t])
            best_gain = float(gain[t])
            best_nl = int(nl[t])
    return best_f, best_thr, best_gain, best_nl


def route_forest(depth2, us, vs, scale, bg, tree_off, left, right,
                 du1, dv1, du2, dv2, thr, leaf_mean):
    """Mean over trees of the leaf vector reached by each pixel. (n, dim)."""
    n = us.shape[0]
    ntree = tree_off.shape[0] - 1
    uf = us.astype(np.float64)
    vf = vs.astype(np.float64)
    acc = np.zeros((n, leaf_mean.shape[1]), dtype=np.float64)
    for t in range(ntree):
        node = np.full(n, tree_off[t], dtype=np.int64)
        while True:
            act = left[node] >= 0
            if not act.any():
                break
            nn = node[act]
            d1 = _probe(depth2, uf[act], vf[act], scale[act], du1[nn], dv1[nn], bg)
            d2 = _probe(depth2, uf[act], vf[act], scale[act], du2[nn], dv2[nn], bg)
            go_left = (d1 - d2) < thr[nn]
            node[act] = np.where(go_left, left[nn], right[nn])
        acc += leaf_mean[node]
    return acc / ntree


def route_tree(depth2, us, vs, scale, bg, root, left, right,
               du1, dv1, du2, dv2, thr):
    """Leaf node index reached by each pixel in one tree."""
    n = us.shape[0]
    uf = us.astype(np.float64)
    vf = vs.astype(np.float64)
    node = np.full(n, root, dtype=np.int64)
    while True:
        act = left[node] >= 0
        if not act.any():
            break
        nn = node[act]
        d1 = _probe(depth2, uf[act], vf[act], scale[act], du1[nn], dv1[nn], bg)
        d2 = _probe(depth2, uf[act], vf[act], scale[act], du2[nn], dv2[nn], bg)
        go_left = (d1 - d2) < thr[nn]
        node[act] = np.where(go_left, left[nn], right[nn])
    return node


def edt_sq(mask):
    """Exact squared Euclidean distance to the nearest false pixel.

    The image border counts as false. Uses scipy's exact feature transform
    and recomputes squared distances in integer arithmetic so values are
    exact integers.
    """
    pad = np.pad(mask.astype(bool), 1, constant_values=False)
    ind = ndimage.distance_transform_edt(pad, return_distances=False, return_indices=True)
    ii, jj = np.indices(pad.shape)
    sq = (ind[0].astype(np.int64) - ii) ** 2 + (ind[1].astype(np.int64) - jj) ** 2
    return sq[1:-1, 1:-1].astype(np.float64)


def nearest_joint(points, joints):
    """Index of (and squared distance to) the nearest joint per point.

    Ties break to the lowest joint index.
    """
    diff = points[:, None, :] - joints[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    idx = np.argmin(d2, axis=1)
    return idx.astype(np.int64), d2[np.arange(points.shape[0]), idx]


_NEIGH_U = np.array([0, 1, 1, 1, 0, -1, -1, -1], dtype=np.int64)  # N NE E SE S SW W NW
_NEIGH_V = np.array([-1, -1, 0, 1, 1, 1, 0, -1], dtype=np.int64)
_DIR_INDEX = {(int(_NEIGH_U[k]), int(_NEIGH_V[k])): k for k in range(8)}


def trace_loop(mask):
    """Moore-neighbor boundary trace of the (single) foreground component.

    Returns (m, 2) int64 (u, v) pixels, consecutive entries 8-adjacent. The
    walk stops at the first repeated (pixel, backtrack) state, which for
    well-formed masks is the start state, closing the loop. Caller
    guarantees a non-empty mask.
    """
    h, w = mask.shape
    start = None
    for v in range(h):
        row = np.nonzero(mask[v])[0]
        if row.size:
            start = (int(row[0]), v)
            break
    if start is None:
        raise ValueError("trace_loop on empty mask")
    cu, cv = start
    bu, bv = cu - 1, cv  # backtrack: background west of start by scan order
    out = []
    seen = np.zeros((h, w, 8), dtype=bool)
    while True:
        bi = _DIR_INDEX[(bu - cu, bv - cv)]
        if seen[cv, cu, bi]:
            break
        seen[cv, cu, bi] = True
        out.append((cu, cv))
        found = False
        for k in range(1, 9):
            d = (bi + k) % 8
            tu = cu + int(_NEIGH_U[d])
            tv = cv + int(_NEIGH_V[d])
            if 0 <= tu < w and 0 <= tv < h and mask[tv, tu]:
                pd = (bi + k - 1) % 8
                bu = cu + int(_NEIGH_U[pd])
                bv = cv + int(_NEIGH_V[pd])
                cu, cv = tu, tv
                found = True
                break
        if not found:
            break  # isolated single pixel
    return np.array(out, dtype=np.int64)
