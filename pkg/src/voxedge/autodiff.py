"""Reverse-mode automatic differentiation over dense numpy arrays.

A Node wraps one ndarray plus a backward closure; building ops grows an
implicit tape, and ``backward`` on a scalar root walks it once in reverse
topological order, accumulating gradients additively at fan-out. The op set
is exactly what the completion network needs: dense/conv/norm layers, shape
plumbing, pooling, and fused point-cloud losses. Gradients never flow into
subgraphs built purely from constants.

Checking mode runs the whole tape in float64; training runs float32. The
finite-difference ``grad_check`` is the correctness oracle for every op.
"""

from __future__ import annotations

import struct

import numpy as np

from . import kernels

NORM_EPS = 1e-5
BCE_EPS = 1e-7
#: softplus(x + SOFTPLUS_ONE) == 1 at x == 0, so zero projections modulate
#: with scale exactly 1.
SOFTPLUS_ONE = float(np.log(np.e - 1.0))

CHECKPOINT_MAGIC = b"VEPT\x00"


class Node:
    """One tape entry: a value, its parents, and a backward closure."""

    __slots__ = ("value", "parents", "grad", "needs_grad", "_backward")

    def __init__(self, value, parents=(), backward=None, needs_grad=False):
        self.value = value
        self.parents = parents
        self.grad = None
        self.needs_grad = needs_grad
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, needs_grad={self.needs_grad})"


def leaf(value, dtype=None) -> Node:
    """A differentiable input (parameter or checked input)."""
    arr = np.asarray(value, dtype=dtype)
    return Node(arr, needs_grad=True)


def const(value, dtype=None) -> Node:
    """A non-differentiable input; gradients never flow into it."""
    arr = np.asarray(value, dtype=dtype)
    return Node(arr, needs_grad=False)


def _make(value, parents, backward):
    needs = any(p.needs_grad for p in parents)
    if not needs:
        return Node(value, needs_grad=False)
    return Node(value, tuple(parents), backward, True)


def _acc(p: Node, g, own: bool) -> None:
    """Accumulate g into p.grad. own=True promises g is freshly allocated
    and may be adopted without copying."""
    if not p.needs_grad:
        return
    if p.grad is None:
        p.grad = g if own else g.copy()
    else:
        p.grad += g


def backward(root: Node) -> None:
    """Backpropagate from a scalar root through the tape.

    Visits every reachable node exactly once; forward values are never
    modified. Intermediate gradients are freed as soon as they are consumed.
    """
    if root.value.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
    topo = []
    seen = {id(root)}
    stack = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.needs_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p.parents)))
                advanced = True
                break
        if not advanced:
            topo.append(node)
            stack.pop()
    root.grad = np.ones((), dtype=root.value.dtype)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # leaves have no _backward, so theirs survive


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _same_shape(a: Node, b: Node, opname: str):
    if a.value.shape != b.value.shape:
        raise ValueError(f"{opname}: shape mismatch {a.value.shape} vs {b.value.shape}")


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")

    def back(g):
        _acc(a, g, own=False)
        _acc(b, g, own=False)

    return _make(a.value + b.value, (a, b), back)


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")

    def back(g):
        _acc(a, g, own=False)
        _acc(b, -g, own=True)

    return _make(a.value - b.value, (a, b), back)


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")

    def back(g):
        _acc(a, g * b.value, own=True)
        _acc(b, g * a.value, own=True)

    return _make(a.value * b.value, (a, b), back)


def scale(a: Node, c: float) -> Node:
    c = float(c)

    def back(g):
        _acc(a, g * c, own=True)

    return _make(a.value * c, (a,), back)


def add_const(a: Node, c: float) -> Node:
    def back(g):
        _acc(a, g, own=False)

    return _make(a.value + float(c), (a,), back)


def relu(a: Node) -> Node:
    mask = a.value > 0

    def back(g):
        _acc(a, g * mask, own=True)

    return _make(a.value * mask, (a,), back)


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)

    def back(g):
        _acc(a, g * (1.0 - y * y), own=True)

    return _make(y, (a,), back)


def sigmoid(a: Node) -> Node:
    x = a.value
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype, copy=False)

    def back(g):
        _acc(a, g * (y * (1.0 - y)), own=True)

    return _make(y, (a,), back)


def softplus(a: Node) -> Node:
    x = a.value
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def back(g):
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _acc(a, g * sig.astype(x.dtype, copy=False), own=True)

    return _make(y.astype(x.dtype, copy=False), (a,), back)


def reshape(a: Node, shape) -> Node:
    shape = tuple(shape)

    def back(g):
        _acc(a, g.reshape(a.value.shape), own=False)

    return _make(a.value.reshape(shape), (a,), back)


def concat(nodes, axis: int = 0) -> Node:
    if not nodes:
        raise ValueError("concat: need at least one node")
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for n, s, e in zip(nodes, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(s), int(e))
            _acc(n, g[tuple(sl)], own=False)

    return _make(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), back)


def slice_axis0(a: Node, start: int, stop: int) -> Node:
    def back(g):
        full = np.zeros_like(a.value)
        full[start:stop] = g
        _acc(a, full, own=True)

    return _make(a.value[start:stop].copy(), (a,), back)


def gather_cols(a: Node, idx) -> Node:
    """Select columns of a (C, L) array, with repetition allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim != 2:
        raise ValueError("gather_cols: input must be 2-D")

    def back(g):
        buf = np.zeros((a.value.shape[1], a.value.shape[0]), dtype=g.dtype)
        np.add.at(buf, idx, g.T)
        _acc(a, np.ascontiguousarray(buf.T), own=True)

    return _make(np.ascontiguousarray(a.value[:, idx]), (a,), back)


def scatter_vec(a: Node, idx, size: int) -> Node:
    """Place a vector's entries at unique positions of a zero vector."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim != 1 or idx.shape != a.value.shape:
        raise ValueError("scatter_vec: need matching 1-D value and index arrays")

    out = np.zeros(size, dtype=a.value.dtype)
    out[idx] = a.value

    def back(g):
        _acc(a, g[idx].copy(), own=True)

    return _make(out, (a,), back)


def reduce_mean(a: Node) -> Node:
    size = a.value.size

    def back(g):
        _acc(a, np.full(a.value.shape, g / size, dtype=a.value.dtype), own=True)

    return _make(np.asarray(a.value.mean(), dtype=a.value.dtype), (a,), back)


def reduce_sum(a: Node) -> Node:
    def back(g):
        _acc(a, np.full(a.value.shape, g, dtype=a.value.dtype), own=True)

    return _make(np.asarray(a.value.sum(), dtype=a.value.dtype), (a,), back)


# ---------------------------------------------------------------------------
# dense and convolutional layers


def linear(w: Node, x: Node, b: Node | None = None) -> Node:
    """w @ x (+ b). x may be a vector (I,) or a column batch (I, N)."""
    if w.value.ndim != 2 or w.value.shape[1] != x.value.shape[0]:
        raise ValueError(f"linear: w {w.value.shape} does not match x {x.value.shape}")
    y = w.value @ x.value
    if b is not None:
        if b.value.shape != (w.value.shape[0],):
            raise ValueError("linear: bias shape mismatch")
        y = y + (b.value if x.value.ndim == 1 else b.value[:, None])

    def back(g):
        if x.value.ndim == 1:
            _acc(w, np.outer(g, x.value), own=True)
            if b is not None:
                _acc(b, g, own=False)
        else:
            _acc(w, g @ x.value.T, own=True)
            if b is not None:
                _acc(b, g.sum(axis=1), own=True)
        _acc(x, w.value.T @ g, own=True)

    parents = (w, x) if b is None else (w, x, b)
    return _make(y, parents, back)


def _conv_out_size(d, k, s, p, dil):
    span = d + 2 * p - dil * (k - 1) - 1
    if span < 0 or span % s != 0:
        raise ValueError(
            f"conv3d: size {d} with kernel {k}, stride {s}, padding {p}, dilation {dil} "
            "does not give an integer output size"
        )
    out = span // s + 1
    if out < 1:
        raise ValueError("conv3d: non-positive output size")
    return out


def conv3d(x: Node, w: Node, b: Node, stride: int = 1, padding: int = 0, dilation: int = 1) -> Node:
    """Cross-correlation of a (C, D, H, W) volume with (O, C, k, k, k) filters."""
    c, d, h, wd = x.value.shape
    o, ci, k = w.value.shape[0], w.value.shape[1], w.value.shape[2]
    if w.value.ndim != 5 or w.value.shape[2:] != (k, k, k) or ci != c:
        raise ValueError(f"conv3d: weight {w.value.shape} does not match input {x.value.shape}")
    if b.value.shape != (o,):
        raise ValueError("conv3d: bias shape mismatch")
    do = _conv_out_size(d, k, stride, padding, dilation)
    ho = _conv_out_size(h, k, stride, padding, dilation)
    wo = _conv_out_size(wd, k, stride, padding, dilation)

    p = padding
    xp = np.pad(x.value, ((0, 0), (p, p), (p, p), (p, p))) if p else x.value
    cols = kernels.im2col3(xp, k, stride, dilation, do, ho, wo)
    wf = w.value.reshape(o, c * k**3)
    y = (wf @ cols + b.value[:, None]).reshape(o, do, ho, wo)

    def back(g):
        gf = g.reshape(o, do * ho * wo)
        _acc(b, gf.sum(axis=1), own=True)
        _acc(w, (gf @ cols.T).reshape(w.value.shape), own=True)
        if x.needs_grad:
            gcols = wf.T @ gf
            gxp = kernels.col2im3(
                gcols, c, d + 2 * p, h + 2 * p, wd + 2 * p, k, stride, dilation, do, ho, wo
            )
            gx = gxp[:, p : p + d, p : p + h, p : p + wd] if p else gxp
            _acc(x, np.ascontiguousarray(gx), own=True)

    return _make(y, (x, w, b), back)


def tconv3d(x: Node, w: Node, b: Node, stride: int = 2, padding: int = 1) -> Node:
    """Transposed convolution with (C_in, C_out, k, k, k) filters.

    The default kernel 4 / stride 2 / padding 1 doubles each spatial extent
    exactly. Forward is the adjoint of conv3d's input gradient, so the pair
    shares its im2col/col2im kernels.
    """
    ci, d, h, wd = x.value.shape
    if (
        w.value.ndim != 5
        or w.value.shape[0] != ci
        or not (w.value.shape[2] == w.value.shape[3] == w.value.shape[4])
    ):
        raise ValueError(f"tconv3d: weight {w.value.shape} does not match input {x.value.shape}")
    co, k = w.value.shape[1], w.value.shape[2]
    if b.value.shape != (co,):
        raise ValueError("tconv3d: bias shape mismatch")
    p = padding
    do = (d - 1) * stride - 2 * p + k
    ho = (h - 1) * stride - 2 * p + k
    wo = (wd - 1) * stride - 2 * p + k
    if min(do, ho, wo) < 1:
        raise ValueError("tconv3d: non-positive output size")
    # consistency with the adjoint conv's output arithmetic
    _conv_out_size(do, k, stride, p, 1)

    wf = w.value.reshape(ci, co * k**3)
    xf = x.value.reshape(ci, d * h * wd)
    gcols = wf.T @ xf
    ypad = kernels.col2im3(gcols, co, do + 2 * p, ho + 2 * p, wo + 2 * p, k, stride, 1, d, h, wd)
    y = ypad[:, p : p + do, p : p + ho, p : p + wo] if p else ypad
    y = np.ascontiguousarray(y) + b.value[:, None, None, None]

    def back(g):
        _acc(b, g.sum(axis=(1, 2, 3)), own=True)
        gp = np.pad(g, ((0, 0), (p, p), (p, p), (p, p))) if p else g
        cols_g = kernels.im2col3(gp, k, stride, 1, d, h, wd)
        _acc(w, (xf @ cols_g.T).reshape(w.value.shape), own=True)
        if x.needs_grad:
            _acc(x, (wf @ cols_g).reshape(x.value.shape), own=True)

    return _make(y, (x, w, b), back)


# ---------------------------------------------------------------------------
# normalization


def _spatial_axes(x):
    return tuple(range(1, x.ndim))


def channel_standardize(x: Node, eps: float = NORM_EPS) -> Node:
    """Zero-mean unit-variance per channel over all non-channel axes."""
    if x.value.ndim < 2:
        raise ValueError("channel_standardize: need at least one non-channel axis")
    axes = _spatial_axes(x.value)
    n = int(np.prod([x.value.shape[i] for i in axes]))
    mu = x.value.mean(axis=axes, keepdims=True)
    var = x.value.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv

    def back(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g - gm - xhat * (g * xhat).mean(axis=axes, keepdims=True)) * inv
        _acc(x, gx.astype(x.value.dtype, copy=False), own=True)

    return _make(xhat.astype(x.value.dtype, copy=False), (x,), back)


def channel_affine(x: Node, gain: Node, shift: Node) -> Node:
    """Per-channel y = x * gain + shift with (C,) gain and shift."""
    c = x.value.shape[0]
    if gain.value.shape != (c,) or shift.value.shape != (c,):
        raise ValueError("channel_affine: gain/shift must have shape (C,)")
    bshape = (c,) + (1,) * (x.value.ndim - 1)
    gv = gain.value.reshape(bshape)

    def back(g):
        axes = _spatial_axes(x.value)
        _acc(gain, (g * x.value).sum(axis=axes), own=True)
        _acc(shift, g.sum(axis=axes), own=True)
        _acc(x, g * gv, own=True)

    return _make(x.value * gv + shift.value.reshape(bshape), (x, gain, shift), back)


def instance_norm(x: Node, gain: Node, shift: Node, eps: float = NORM_EPS) -> Node:
    """Per-channel standardization over spatial axes followed by affine."""
    return channel_affine(channel_standardize(x, eps), gain, shift)


def adain(x: Node, z: Node, proj_w: Node, proj_b: Node) -> Node:
    """Re-statistic x per channel with mean/scale projected from a latent.

    The projection yields 2C values: C shifts and C raw scales; scales pass
    through a shifted softplus that maps raw 0 to exactly 1, so a zero
    projection reduces to plain instance standardization.
    """
    c = x.value.shape[0]
    h = linear(proj_w, z, proj_b)
    if h.value.shape != (2 * c,):
        raise ValueError(f"adain: projection must produce 2C={2*c} values, got {h.value.shape}")
    mu = slice_axis0(h, 0, c)
    sigma = softplus(add_const(slice_axis0(h, c, 2 * c), SOFTPLUS_ONE))
    return channel_affine(channel_standardize(x), sigma, mu)


def batch_norm(
    x: Node,
    gain: Node,
    shift: Node,
    running: dict,
    training: bool,
    momentum: float = 0.9,
    eps: float = NORM_EPS,
) -> Node:
    """Per-channel normalization with tracked running statistics.

    Training mode standardizes with the current batch's statistics and
    folds them into ``running`` as old*momentum + new*(1-momentum);
    evaluation mode normalizes with the stored running statistics.
    """
    if training:
        axes = _spatial_axes(x.value)
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        running["mean"] = momentum * running["mean"] + (1.0 - momentum) * mu.astype(np.float64)
        running["var"] = momentum * running["var"] + (1.0 - momentum) * var.astype(np.float64)
        return channel_affine(channel_standardize(x, eps), gain, shift)

    bshape = (x.value.shape[0],) + (1,) * (x.value.ndim - 1)
    mu = running["mean"].astype(x.value.dtype).reshape(bshape)
    inv = (1.0 / np.sqrt(running["var"] + eps)).astype(x.value.dtype).reshape(bshape)

    def back(g):
        axes = _spatial_axes(x.value)
        xhat = (x.value - mu) * inv
        _acc(gain, (g * xhat).sum(axis=axes), own=True)
        _acc(shift, g.sum(axis=axes), own=True)
        _acc(x, g * inv * gain.value.reshape(bshape), own=True)

    y = (x.value - mu) * inv * gain.value.reshape(bshape) + shift.value.reshape(bshape)
    return _make(y.astype(x.value.dtype, copy=False), (x, gain, shift), back)


# ---------------------------------------------------------------------------
# pooling and resampling


def max_pool3d(x: Node) -> Node:
    """2x2x2 max pooling with stride 2; ties take the first flat position."""
    c, d, h, w = x.value.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"max_pool3d: spatial sizes must be even, got {x.value.shape}")
    blocks = (
        x.value.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, d // 2, h // 2, w // 2, 8)
    )
    arg = blocks.argmax(axis=4)
    y = np.take_along_axis(blocks, arg[..., None], axis=4)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=4)
        gx = (
            gb.reshape(c, d // 2, h // 2, w // 2, 2, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3, 6)
            .reshape(c, d, h, w)
        )
        _acc(x, np.ascontiguousarray(gx), own=True)

    return _make(np.ascontiguousarray(y), (x,), back)


def upsample2(x: Node) -> Node:
    """Nearest-neighbor doubling of all three spatial extents."""
    if x.value.ndim != 4:
        raise ValueError("upsample2: need a (C, D, H, W) input")
    y = x.value.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)

    def back(g):
        c, d, h, w = x.value.shape
        gx = g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6))
        _acc(x, gx, own=True)

    return _make(y, (x,), back)


# ---------------------------------------------------------------------------
# cell feature plumbing


def scatter_mean_cols(feat: Node, ids, ncells: int) -> Node:
    """Mean of feature columns per cell id; empty cells stay zero."""
    ids = np.asarray(ids, dtype=np.int64)
    if feat.value.ndim != 2 or ids.shape != (feat.value.shape[1],):
        raise ValueError("scatter_mean_cols: need (C, N) features and (N,) ids")
    counts = np.bincount(ids, minlength=ncells).astype(feat.value.dtype)
    safe = np.maximum(counts, 1)
    sums = kernels.scatter_sum(feat.value, ids, ncells)
    y = sums / safe

    def back(g):
        _acc(feat, np.ascontiguousarray((g / safe)[:, ids]), own=True)

    return _make(y, (feat,), back)


def masked_softmax(a: Node, mask) -> Node:
    """Softmax over the True positions of mask; other entries are zero."""
    mask = np.asarray(mask, dtype=bool)
    if a.value.shape != mask.shape or a.value.ndim != 1:
        raise ValueError("masked_softmax: need matching 1-D value and mask")
    if not mask.any():
        raise ValueError("masked_softmax: mask selects nothing")
    sel = a.value[mask]
    e = np.exp(sel - sel.max())
    s = e / e.sum()
    y = np.zeros_like(a.value)
    y[mask] = s

    def back(g):
        gs = g[mask]
        gsel = s * (gs - (gs * s).sum())
        full = np.zeros_like(a.value)
        full[mask] = gsel
        _acc(a, full, own=True)

    return _make(y, (a,), back)


def offset_points(offsets: Node, centers, cell_width: float) -> Node:
    """Points = fixed cell centers + offsets (3, M) scaled by cell width."""
    centers = np.asarray(centers, dtype=offsets.value.dtype)
    if offsets.value.ndim != 2 or offsets.value.shape[0] != 3:
        raise ValueError("offset_points: offsets must be (3, M)")
    if centers.shape != (offsets.value.shape[1], 3):
        raise ValueError("offset_points: centers must be (M, 3)")
    cw = float(cell_width)

    def back(g):
        _acc(offsets, np.ascontiguousarray(g.T) * np.asarray(cw, dtype=g.dtype), own=True)

    return _make(centers + offsets.value.T * cw, (offsets,), back)


# ---------------------------------------------------------------------------
# fused losses over the tape


def chamfer_loss(pred: Node, gt) -> Node:
    """Differentiable symmetric mean squared nearest-neighbor distance from
    a predicted (M, 3) cloud to a fixed target."""
    gt = np.asarray(gt, dtype=pred.value.dtype)
    if pred.value.ndim != 2 or pred.value.shape[1] != 3 or gt.ndim != 2 or gt.shape[1] != 3:
        raise ValueError("chamfer_loss: point arrays must be (N, 3)")
    if pred.value.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("chamfer_loss: point clouds must be non-empty")
    m = pred.value.shape[0]
    n = gt.shape[0]
    d2_pg, idx_pg = kernels.pairwise_nn(pred.value, gt)
    d2_gp, idx_gp = kernels.pairwise_nn(gt, pred.value)
    val = np.asarray(d2_pg.mean() + d2_gp.mean(), dtype=pred.value.dtype)

    def back(g):
        gp = (2.0 / m) * (pred.value - gt[idx_pg])
        buf = np.zeros_like(pred.value)
        np.add.at(buf, idx_gp, (2.0 / n) * (pred.value[idx_gp] - gt))
        _acc(pred, (gp + buf) * g, own=True)

    return _make(val, (pred,), back)


def chamfer_sharp_loss(pred: Node, gt) -> Node:
    """Differentiable fifth-power chamfer: per direction (sum d^5)^(1/5) / N."""
    gt = np.asarray(gt, dtype=pred.value.dtype)
    if pred.value.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("chamfer_sharp_loss: point clouds must be non-empty")
    m = pred.value.shape[0]
    n = gt.shape[0]
    d2_pg, idx_pg = kernels.pairwise_nn(pred.value, gt)
    d2_gp, idx_gp = kernels.pairwise_nn(gt, pred.value)
    d_pg = np.sqrt(d2_pg)
    d_gp = np.sqrt(d2_gp)
    s_pg = (d_pg**5).sum()
    s_gp = (d_gp**5).sum()
    val = np.asarray(s_pg**0.2 / m + s_gp**0.2 / n, dtype=pred.value.dtype)

    def back(g):
        # d/dp_i of (sum_j d_j^5)^(1/5)/N is S^(-4/5) d_i^3 (p_i - q_i) / N
        out = np.zeros_like(pred.value)
        if s_pg > 0:
            coef = s_pg**-0.8 * d_pg**3 / m
            out += coef[:, None] * (pred.value - gt[idx_pg])
        if s_gp > 0:
            coef = s_gp**-0.8 * d_gp**3 / n
            np.add.at(out, idx_gp, coef[:, None] * (pred.value[idx_gp] - gt))
        _acc(pred, out * g, own=True)

    return _make(val, (pred,), back)


def bce_mean(pred: Node, gt) -> Node:
    """Mean binary cross entropy with predictions clamped to
    [1e-7, 1 - 1e-7]; clamped entries receive zero gradient."""
    gt = np.asarray(gt, dtype=pred.value.dtype)
    if pred.value.shape != gt.shape:
        raise ValueError(f"bce_mean: shape mismatch {pred.value.shape} vs {gt.shape}")
    lo, hi = BCE_EPS, 1.0 - BCE_EPS
    p = np.clip(pred.value, lo, hi)
    size = p.size
    val = np.asarray(-(gt * np.log(p) + (1.0 - gt) * np.log1p(-p)).mean(), dtype=pred.value.dtype)

    def back(g):
        inside = (pred.value > lo) & (pred.value < hi)
        dp = (-(gt / p) + (1.0 - gt) / (1.0 - p)) / size
        _acc(pred, (g * dp * inside).astype(pred.value.dtype, copy=False), own=True)

    return _make(val, (pred,), back)


def hinge_radius(points: Node, centers, cell_width: float) -> Node:
    """Sum of max(||p - c|| / cell_width - sqrt(3), 0) over points."""
    centers = np.asarray(centers, dtype=points.value.dtype)
    if points.value.shape != centers.shape:
        raise ValueError("hinge_radius: points and centers must match")
    cw = float(cell_width)
    diff = points.value - centers
    dist = np.sqrt((diff * diff).sum(axis=1))
    u = dist / cw
    thresh = np.sqrt(3.0)
    active = u > thresh
    val = np.asarray(np.maximum(u - thresh, 0.0).sum(), dtype=points.value.dtype)

    def back(g):
        gp = np.zeros_like(points.value)
        nz = active & (dist > 0)
        gp[nz] = diff[nz] / (dist[nz, None] * cw)
        _acc(points, gp * g, own=True)

    return _make(val, (points,), back)


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(fn, inputs, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite-difference
    gradients of a scalar-valued tape builder.

    fn receives one leaf per input and must rebuild the tape from scratch on
    every call; inputs are promoted to float64.
    """
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]

    def run(vals):
        leaves = [leaf(v) for v in vals]
        out = fn(*leaves)
        if out.value.shape != ():
            raise ValueError("grad_check: fn must produce a scalar")
        return out, leaves

    out, leaves = run(arrays)
    backward(out)
    analytic = [
        l.grad if l.grad is not None else np.zeros_like(l.value) for l in leaves
    ]

    worst = 0.0
    for i, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(run(arrays)[0].value)
            flat[j] = orig - eps
            fm = float(run(arrays)[0].value)
            flat[j] = orig
            fd = (fp - fm) / (2.0 * eps)
            a = float(analytic[i].reshape(-1)[j])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst


def _proj_scalar(node: Node, weights: np.ndarray) -> Node:
    # random projection keeps placement errors visible where a plain sum
    # over outputs would cancel them
    return reduce_sum(mul(node, const(weights)))


def _away_from_zero(x: np.ndarray, gap: float = 0.1) -> np.ndarray:
    return np.where(x >= 0, x + gap, x - gap)


def _op_trials(rng):
    """Yield (name, builder, inputs) gradient-check trials for every op.

    Kinked ops (relu, max pool, hinge, clamp) get inputs placed away from
    their non-smooth sets so central differences are valid.
    """
    shp = (3, 4)
    w2 = rng.standard_normal(shp)

    def two_arg(op):
        def fn(a, b):
            return _proj_scalar(op(a, b), w2)

        return fn, [rng.standard_normal(shp), rng.standard_normal(shp)]

    yield ("add", *two_arg(add))
    yield ("sub", *two_arg(sub))
    yield ("mul", *two_arg(mul))

    wu = rng.standard_normal(shp)
    yield ("scale", lambda a: _proj_scalar(scale(a, 1.7), wu), [rng.standard_normal(shp)])
    yield ("add_const", lambda a: _proj_scalar(add_const(a, -0.9), wu), [rng.standard_normal(shp)])
    yield (
        "relu",
        lambda a: _proj_scalar(relu(a), wu),
        [_away_from_zero(rng.standard_normal(shp))],
    )
    yield ("tanh", lambda a: _proj_scalar(tanh(a), wu), [rng.standard_normal(shp)])
    yield ("sigmoid", lambda a: _proj_scalar(sigmoid(a), wu), [rng.standard_normal(shp)])
    yield ("softplus", lambda a: _proj_scalar(softplus(a), wu), [rng.standard_normal(shp)])

    wr = rng.standard_normal((2, 6))
    yield ("reshape", lambda a: _proj_scalar(reshape(a, (2, 6)), wr), [rng.standard_normal((3, 4))])

    wc = rng.standard_normal((7, 3))
    yield (
        "concat",
        lambda a, b, c: _proj_scalar(concat([a, b, c], axis=0), wc),
        [rng.standard_normal((2, 3)), rng.standard_normal((1, 3)), rng.standard_normal((4, 3))],
    )
    ws = rng.standard_normal((4,))
    yield ("slice_axis0", lambda a: _proj_scalar(slice_axis0(a, 2, 6), ws), [rng.standard_normal(8)])

    gidx = np.array([0, 2, 2, 5, 7, 1])
    wg = rng.standard_normal((3, 6))
    yield ("gather_cols", lambda a: _proj_scalar(gather_cols(a, gidx), wg), [rng.standard_normal((3, 8))])

    sidx = rng.permutation(10)[:6]
    wv = rng.standard_normal(10)
    yield ("scatter_vec", lambda a: _proj_scalar(scatter_vec(a, sidx, 10), wv), [rng.standard_normal(6)])

    yield ("reduce_mean", lambda a: reduce_mean(a), [rng.standard_normal((4, 5))])
    yield ("reduce_sum", lambda a: reduce_sum(a), [rng.standard_normal((4, 5))])

    wl = rng.standard_normal((4, 7))
    yield (
        "linear",
        lambda w, x, b: _proj_scalar(linear(w, x, b), wl),
        [rng.standard_normal((4, 3)), rng.standard_normal((3, 7)), rng.standard_normal(4)],
    )

    wc1 = rng.standard_normal((3, 4, 4, 4))
    yield (
        "conv3d",
        lambda x, w, b: _proj_scalar(conv3d(x, w, b, 1, 1), wc1),
        [rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((3, 2, 3, 3, 3)), rng.standard_normal(3)],
    )
    wc2 = rng.standard_normal((3, 3, 3, 3))
    yield (
        "conv3d_s2",
        lambda x, w, b: _proj_scalar(conv3d(x, w, b, 2, 1), wc2),
        [rng.standard_normal((2, 6, 6, 6)), rng.standard_normal((3, 2, 4, 4, 4)), rng.standard_normal(3)],
    )
    wc3 = rng.standard_normal((2, 6, 6, 6))
    yield (
        "conv3d_dil2",
        lambda x, w, b: _proj_scalar(conv3d(x, w, b, 1, 2, 2), wc3),
        [rng.standard_normal((2, 6, 6, 6)), rng.standard_normal((2, 2, 3, 3, 3)), rng.standard_normal(2)],
    )
    wt = rng.standard_normal((3, 8, 8, 8))
    yield (
        "tconv3d",
        lambda x, w, b: _proj_scalar(tconv3d(x, w, b), wt),
        [rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((2, 3, 4, 4, 4)), rng.standard_normal(3)],
    )

    wn = rng.standard_normal((3, 5))
    yield ("channel_standardize", lambda x: _proj_scalar(channel_standardize(x), wn), [rng.standard_normal((3, 5))])
    wa = rng.standard_normal((3, 4, 2))
    yield (
        "channel_affine",
        lambda x, g, s: _proj_scalar(channel_affine(x, g, s), wa),
        [rng.standard_normal((3, 4, 2)), rng.standard_normal(3), rng.standard_normal(3)],
    )
    wi = rng.standard_normal((2, 4, 4))
    yield (
        "instance_norm",
        lambda x, g, s: _proj_scalar(instance_norm(x, g, s), wi),
        [rng.standard_normal((2, 4, 4)), rng.standard_normal(2), rng.standard_normal(2)],
    )
    wad = rng.standard_normal((3, 4, 4))
    yield (
        "adain",
        lambda x, z, pw, pb: _proj_scalar(adain(x, z, pw, pb), wad),
        [
            rng.standard_normal((3, 4, 4)),
            rng.standard_normal(5),
            rng.standard_normal((6, 5)),
            rng.standard_normal(6),
        ],
    )

    wb = rng.standard_normal((3, 4, 2))

    def bn_train(x, g, s):
        buf = {"mean": np.zeros(3), "var": np.ones(3)}
        return _proj_scalar(batch_norm(x, g, s, buf, training=True), wb)

    yield (
        "batch_norm",
        bn_train,
        [rng.standard_normal((3, 4, 2)), rng.standard_normal(3), rng.standard_normal(3)],
    )
    frozen = {"mean": rng.standard_normal(3), "var": rng.uniform(0.2, 2.0, 3)}
    yield (
        "batch_norm_eval",
        lambda x, g, s: _proj_scalar(batch_norm(x, g, s, frozen, training=False), wb),
        [rng.standard_normal((3, 4, 2)), rng.standard_normal(3), rng.standard_normal(3)],
    )

    # strictly separated pool inputs so the argmax cannot flip under eps
    pool_vals = rng.permutation(np.linspace(-1.0, 1.0, 2 * 4 * 4 * 4)).reshape(2, 4, 4, 4)
    wp = rng.standard_normal((2, 2, 2, 2))
    yield ("max_pool3d", lambda x: _proj_scalar(max_pool3d(x), wp), [pool_vals])
    wup = rng.standard_normal((2, 4, 4, 4))
    yield ("upsample2", lambda x: _proj_scalar(upsample2(x), wup), [rng.standard_normal((2, 2, 2, 2))])

    ids = rng.integers(0, 6, size=10)
    wsc = rng.standard_normal((3, 6))
    yield (
        "scatter_mean_cols",
        lambda f: _proj_scalar(scatter_mean_cols(f, ids, 6), wsc),
        [rng.standard_normal((3, 10))],
    )
    mask = np.zeros(12, dtype=bool)
    mask[rng.permutation(12)[:7]] = True
    wm = rng.standard_normal(12)
    yield ("masked_softmax", lambda a: _proj_scalar(masked_softmax(a, mask), wm), [rng.standard_normal(12)])

    centers = rng.random((6, 3))
    wo = rng.standard_normal((6, 3))
    yield (
        "offset_points",
        lambda o: _proj_scalar(offset_points(o, centers, 0.25), wo),
        [rng.uniform(-0.9, 0.9, (3, 6))],
    )

    gt = rng.random((9, 3))
    yield ("chamfer_loss", lambda p: chamfer_loss(p, gt), [rng.random((6, 3))])
    yield ("chamfer_sharp_loss", lambda p: chamfer_sharp_loss(p, gt), [rng.random((6, 3))])

    target = (rng.random(10) > 0.5).astype(np.float64)
    yield ("bce_mean", lambda p: bce_mean(p, target), [rng.uniform(0.2, 0.8, 10)])

    # radii straddle the sqrt(3) hinge with a wide margin on both sides
    hc = rng.random((8, 3))
    dirs = rng.standard_normal((8, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.concatenate([rng.uniform(0.5, 1.2, 4), rng.uniform(2.2, 3.0, 4)])
    hinge_pts = hc + dirs * (radii * 0.25)[:, None]
    yield ("hinge_radius", lambda p: hinge_radius(p, hc, 0.25), [hinge_pts])


def ops_grad_report(seed: int = 0, shapes: int = 3, eps: float = 1e-5) -> dict:
    """Max relative finite-difference error per op over several random
    instances; the basis of the operator-level gradient oracle."""
    report: dict[str, float] = {}
    for k in range(shapes):
        rng = np.random.default_rng([seed, k])
        for name, fn, inputs in _op_trials(rng):
            err = grad_check(fn, inputs, eps=eps)
            report[name] = max(err, report.get(name, 0.0))
    return report


# ---------------------------------------------------------------------------
# optimizer


def adam_init() -> dict:
    return {"step": 0, "m": {}, "v": {}}


def adam_step(
    params: dict,
    grads: dict,
    state: dict,
    lr: float = 0.0007,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One Adam update, in place on the parameter arrays.

    Parameters without a gradient entry are treated as zero-gradient.
    A NaN gradient aborts with the parameter's name.
    """
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if np.isnan(g).any():
            raise FloatingPointError(f"NaN gradient for parameter {name!r}")
        m = state["m"].get(name)
        if m is None:
            m = np.zeros_like(p)
            state["m"][name] = m
            state["v"][name] = np.zeros_like(p)
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_params(path, params: dict) -> None:
    """Write named arrays as float32 records, sorted by name for stable
    bytes."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_params(path) -> dict:
    """Read a checkpoint written by save_params; arrays come back float32."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    (count,) = struct.unpack_from("<I", data, 5)
    pos = 9
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos) if rank else ()
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data[pos : pos + 4 * n], dtype="<f4").reshape(shape)
        pos += 4 * n
        out[name] = arr.copy()
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out
