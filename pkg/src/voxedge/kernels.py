"""Hot numeric kernels in two variants: numba loops and vectorized numpy.

Every kernel ``f`` exists as ``f_nb`` (explicit loops, compiled lazily with
``@njit`` when numba is importable) and ``f_np`` (pure numpy). The unsuffixed
public name binds to the variant selected in :mod:`voxedge.backend`. Index
results are identical between variants; float accumulations agree bitwise
except for ``col2im3``, whose variants add the same terms in a different
order and therefore agree only to rounding. ``python -m voxedge.benchmark``
times the pairs side by side and checks that they agree.

Shape conventions: point arrays are (N, 3); feature arrays are channel-first.
``im2col3``/``col2im3`` use row index ((c*k + kd)*k + kh)*k + kw and column
index (od*Ho + oh)*Wo + ow.
"""

import numpy as np

from . import backend


# ---------------------------------------------------------------------------
# nearest neighbor from every row of a to the rows of b


def _pairwise_nn_loops(a, b):
    n = a.shape[0]
    m = b.shape[0]
    d2 = np.empty(n, dtype=a.dtype)
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        bestj = -1
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                bestj = j
        d2[i] = best
        idx[i] = bestj
    return d2, idx


def pairwise_nn_np(a, b):
    """Squared distance and index of the nearest row of b for every row of a."""
    n = a.shape[0]
    d2 = np.empty(n, dtype=a.dtype)
    idx = np.empty(n, dtype=np.int64)
    block = 512
    for s in range(0, n, block):
        e = min(s + block, n)
        diff = a[s:e, None, :] - b[None, :, :]
        dm = (diff * diff).sum(axis=2)
        ii = np.argmin(dm, axis=1)
        idx[s:e] = ii
        d2[s:e] = dm[np.arange(e - s), ii]
    return d2, idx


# ---------------------------------------------------------------------------
# farthest point sampling


def _fps_loops(pts, m, start):
    n = pts.shape[0]
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf, dtype=pts.dtype)
    cur = start
    out[0] = cur
    for t in range(1, m):
        far = 0
        farv = -1.0
        for j in range(n):
            dx = pts[j, 0] - pts[cur, 0]
            dy = pts[j, 1] - pts[cur, 1]
            dz = pts[j, 2] - pts[cur, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
            if mind[j] > farv:
                farv = mind[j]
                far = j
        cur = far
        out[t] = cur
    return out


def fps_np(pts, m, start):
    """Indices of m farthest-point samples, seeded at index start.

    Ties on the max-min distance resolve to the smallest index, matching the
    loop variant.
    """
    n = pts.shape[0]
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf, dtype=pts.dtype)
    cur = start
    out[0] = cur
    for t in range(1, m):
        diff = pts - pts[cur]
        d = (diff * diff).sum(axis=1)
        np.minimum(mind, d, out=mind)
        cur = int(np.argmax(mind))
        out[t] = cur
    return out


# ---------------------------------------------------------------------------
# k nearest neighbors with optional per-query excluded index


def _knn_loops(pts, queries, k, skip):
    n = pts.shape[0]
    q = queries.shape[0]
    out = np.empty((q, k), dtype=np.int64)
    bd = np.empty(k, dtype=pts.dtype)
    bi = np.empty(k, dtype=np.int64)
    for qi in range(q):
        for t in range(k):
            bd[t] = np.inf
            bi[t] = n
        sk = skip[qi]
        for j in range(n):
            if j == sk:
                continue
            dx = pts[j, 0] - queries[qi, 0]
            dy = pts[j, 1] - queries[qi, 1]
            dz = pts[j, 2] - queries[qi, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < bd[k - 1] or (d == bd[k - 1] and j < bi[k - 1]):
                pos = k - 1
                while pos > 0 and (
                    d < bd[pos - 1] or (d == bd[pos - 1] and j < bi[pos - 1])
                ):
                    bd[pos] = bd[pos - 1]
                    bi[pos] = bi[pos - 1]
                    pos -= 1
                bd[pos] = d
                bi[pos] = j
        for t in range(k):
            out[qi, t] = bi[t]
    return out


def knn_np(pts, queries, k, skip):
    """Indices of the k nearest rows of pts for each query, sorted by
    (squared distance, index). skip[q] >= 0 excludes that one index for
    query q; pass -1 for no exclusion."""
    diff = queries[:, None, :] - pts[None, :, :]
    dm = (diff * diff).sum(axis=2)
    rows = np.nonzero(skip >= 0)[0]
    if rows.size:
        dm[rows, skip[rows]] = np.inf
    order = np.argsort(dm, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k].astype(np.int64))


# ---------------------------------------------------------------------------
# 3d im2col / col2im (inputs already zero-padded)


def _im2col3_loops(xp, k, s, dil, do, ho, wo):
    c = xp.shape[0]
    cols = np.empty((c * k * k * k, do * ho * wo), dtype=xp.dtype)
    for ci in range(c):
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    row = ((ci * k + kd) * k + kh) * k + kw
                    for od in range(do):
                        for oh in range(ho):
                            for ow in range(wo):
                                col = (od * ho + oh) * wo + ow
                                cols[row, col] = xp[
                                    ci,
                                    od * s + kd * dil,
                                    oh * s + kh * dil,
                                    ow * s + kw * dil,
                                ]
    return cols


def im2col3_np(xp, k, s, dil, do, ho, wo):
    """Gather k*k*k patches of a padded (C, Dp, Hp, Wp) volume into a
    (C*k^3, do*ho*wo) matrix."""
    c = xp.shape[0]
    keff = dil * (k - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (keff, keff, keff), axis=(1, 2, 3))
    win = win[:, ::s, ::s, ::s, ::dil, ::dil, ::dil]
    if win.shape[1:4] != (do, ho, wo):
        raise ValueError("window grid does not match requested output shape")
    return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c * k * k * k, do * ho * wo)


def _col2im3_loops(cols, c, dp, hp, wp, k, s, dil, do, ho, wo):
    out = np.zeros((c, dp, hp, wp), dtype=cols.dtype)
    for ci in range(c):
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    row = ((ci * k + kd) * k + kh) * k + kw
                    for od in range(do):
                        for oh in range(ho):
                            for ow in range(wo):
                                col = (od * ho + oh) * wo + ow
                                out[
                                    ci,
                                    od * s + kd * dil,
                                    oh * s + kh * dil,
                                    ow * s + kw * dil,
                                ] += cols[row, col]
    return out


def col2im3_np(cols, c, dp, hp, wp, k, s, dil, do, ho, wo):
    """Scatter-add a (C*k^3, do*ho*wo) patch matrix back onto a padded
    volume; exact adjoint of im2col3."""
    out = np.zeros((c, dp, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(c, k, k, k, do, ho, wo)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                out[
                    :,
                    kd * dil : kd * dil + (do - 1) * s + 1 : s,
                    kh * dil : kh * dil + (ho - 1) * s + 1 : s,
                    kw * dil : kw * dil + (wo - 1) * s + 1 : s,
                ] += c6[:, kd, kh, kw]
    return out


# ---------------------------------------------------------------------------
# scatter-add of per-point features into flat cells


def _scatter_sum_loops(vals, ids, ncells):
    c = vals.shape[0]
    n = vals.shape[1]
    out = np.zeros((c, ncells), dtype=vals.dtype)
    for j in range(n):
        t = ids[j]
        for ci in range(c):
            out[ci, t] += vals[ci, j]
    return out


def scatter_sum_np(vals, ids, ncells):
    """Sum the columns of a (C, N) array into (C, ncells) by cell id.

    Accumulation follows column order, so both variants agree bitwise.
    """
    outt = np.zeros((ncells, vals.shape[0]), dtype=vals.dtype)
    np.add.at(outt, ids, vals.T)
    return np.ascontiguousarray(outt.T)


# ---------------------------------------------------------------------------
# variant registration

if backend.HAVE_NUMBA:
    pairwise_nn_nb = backend.compile_loops(_pairwise_nn_loops)
    fps_nb = backend.compile_loops(_fps_loops)
    knn_nb = backend.compile_loops(_knn_loops)
    im2col3_nb = backend.compile_loops(_im2col3_loops)
    col2im3_nb = backend.compile_loops(_col2im3_loops)
    scatter_sum_nb = backend.compile_loops(_scatter_sum_loops)
else:
    pairwise_nn_nb = None
    fps_nb = None
    knn_nb = None
    im2col3_nb = None
    col2im3_nb = None
    scatter_sum_nb = None

if backend.ACTIVE == "numba":
    pairwise_nn = pairwise_nn_nb
    fps = fps_nb
    knn = knn_nb
    im2col3 = im2col3_nb
    col2im3 = col2im3_nb
    scatter_sum = scatter_sum_nb
else:
    pairwise_nn = pairwise_nn_np
    fps = fps_np
    knn = knn_np
    im2col3 = im2col3_np
    col2im3 = col2im3_np
    scatter_sum = scatter_sum_np

PAIRS = {
    "pairwise_nn": (pairwise_nn_nb, pairwise_nn_np),
    "fps": (fps_nb, fps_np),
    "knn": (knn_nb, knn_np),
    "im2col3": (im2col3_nb, im2col3_np),
    "col2im3": (col2im3_nb, col2im3_np),
    "scatter_sum": (scatter_sum_nb, scatter_sum_np),
}
