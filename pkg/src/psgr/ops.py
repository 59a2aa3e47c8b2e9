"""Differentiable operations over :class:`psgr.autodiff.Var`.

Covers the tensor primitives, the graph-normalization pieces (guarded
divisions, row/column scaling, pair gathers, sparse edge aggregation),
the small-net layers (conv, pooling, bilinear upsampling, batch norm),
and the segmentation losses. Losses are composed from the primitives so
every backward rule in the file is exercised by the same gradcheck
oracle.
"""

from dataclasses import dataclass

import numpy as np

from . import _backend
from .autodiff import Var, as_var
from .errors import ShapeError, ValidationError
from .tensor import SIGMOID_CLAMP

# ---------------------------------------------------------------------------
# arithmetic


def _same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a, b):
    a, b = as_var(a), as_var(b)
    _same_shape("add", a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return Var(a.data + b.data, parents=(a, b), backward_fn=bwd)


def sub(a, b):
    a, b = as_var(a), as_var(b)
    _same_shape("sub", a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return Var(a.data - b.data, parents=(a, b), backward_fn=bwd)


def mul(a, b):
    a, b = as_var(a), as_var(b)
    _same_shape("mul", a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return Var(a.data * b.data, parents=(a, b), backward_fn=bwd)


def div(a, b):
    a, b = as_var(a), as_var(b)
    _same_shape("div", a, b)
    out = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g / b.data)
        if b.requires_grad:
            b.accumulate(-g * out / b.data)

    return Var(out, parents=(a, b), backward_fn=bwd)


def scale(a, c):
    a = as_var(a)
    c = a.data.dtype.type(c)

    def bwd(g):
        a.accumulate(g * c)

    return Var(a.data * c, parents=(a,), backward_fn=bwd)


def mul_const(a, arr):
    """Elementwise product with a non-differentiated array."""
    a = as_var(a)
    arr = np.asarray(arr, dtype=a.data.dtype)

    def bwd(g):
        a.accumulate(g * arr)

    return Var(a.data * arr, parents=(a,), backward_fn=bwd)


def one_minus(a):
    a = as_var(a)

    def bwd(g):
        a.accumulate(-g)

    return Var(1.0 - a.data, parents=(a,), backward_fn=bwd)


def add_bias(x, b):
    """x + b with b broadcast over all leading axes (bias on the last axis)."""
    x, b = as_var(x), as_var(b)
    if x.data.shape[-1] != b.data.shape[-1] or b.data.ndim != 1:
        raise ShapeError(f"add_bias: {x.data.shape} + {b.data.shape}")
    axes = tuple(range(x.data.ndim - 1))

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=axes))

    return Var(x.data + b.data, parents=(x, b), backward_fn=bwd)


# ---------------------------------------------------------------------------
# shape


def reshape(a, shape):
    a = as_var(a)
    shape = tuple(int(s) for s in shape)
    in_shape = a.data.shape

    def bwd(g):
        a.accumulate(g.reshape(in_shape))

    return Var(a.data.reshape(shape), parents=(a,), backward_fn=bwd)


def transpose(a):
    a = as_var(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {a.data.shape}")

    def bwd(g):
        a.accumulate(g.T)

    return Var(np.ascontiguousarray(a.data.T), parents=(a,), backward_fn=bwd)


def concat_channels(vs):
    vs = [as_var(v) for v in vs]
    sizes = [v.data.shape[-1] for v in vs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for v, lo, hi in zip(vs, offsets[:-1], offsets[1:]):
            if v.requires_grad:
                v.accumulate(g[..., lo:hi])

    return Var(np.concatenate([v.data for v in vs], axis=-1), parents=tuple(vs),
               backward_fn=bwd)


def stack_rows(vs):
    """Stack equally-shaped Vars along a new leading axis."""
    vs = [as_var(v) for v in vs]

    def bwd(g):
        for i, v in enumerate(vs):
            if v.requires_grad:
                v.accumulate(g[i])

    return Var(np.stack([v.data for v in vs], axis=0), parents=tuple(vs),
               backward_fn=bwd)


def index_row(a, i):
    """Select a[i] along the leading axis."""
    a = as_var(a)
    i = int(i)

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[i] = g
        a.accumulate(buf)

    return Var(np.array(a.data[i]), parents=(a,), backward_fn=bwd)


def channel(a, c):
    """Select a[..., c] (used by the per-class loss terms)."""
    a = as_var(a)
    c = int(c)

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[..., c] = g
        a.accumulate(buf)

    return Var(np.array(a.data[..., c]), parents=(a,), backward_fn=bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a):
    a = as_var(a)

    def bwd(g):
        a.accumulate(np.full_like(a.data, g))

    return Var(np.array(a.data.sum(), dtype=a.data.dtype), parents=(a,),
               backward_fn=bwd)


def mean_all(a):
    a = as_var(a)
    n = a.data.size

    def bwd(g):
        a.accumulate(np.full_like(a.data, g / n))

    return Var(np.array(a.data.mean(), dtype=a.data.dtype), parents=(a,),
               backward_fn=bwd)


def row_sum(a):
    """Sum a matrix over its columns -> length-N vector (degree vector)."""
    a = as_var(a)
    if a.data.ndim != 2:
        raise ShapeError(f"row_sum: expected a matrix, got {a.data.shape}")

    def bwd(g):
        a.accumulate(np.broadcast_to(g[:, None], a.data.shape))

    return Var(a.data.sum(axis=1), parents=(a,), backward_fn=bwd)


# ---------------------------------------------------------------------------
# activations


def relu(a):
    a = as_var(a)
    mask = a.data > 0

    def bwd(g):
        a.accumulate(g * mask)

    return Var(np.maximum(a.data, 0), parents=(a,), backward_fn=bwd)


def sigmoid(a):
    a = as_var(a)
    x = np.clip(a.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    s = 1.0 / (1.0 + np.exp(-x))

    def bwd(g):
        a.accumulate(g * s * (1.0 - s))

    return Var(s, parents=(a,), backward_fn=bwd)


def identity(a):
    return as_var(a)


NONLINEARITIES = {"sigmoid": sigmoid, "relu": relu, "identity": identity}


def clamp(a, lo, hi):
    a = as_var(a)
    mask = (a.data > lo) & (a.data < hi)

    def bwd(g):
        a.accumulate(g * mask)

    return Var(np.clip(a.data, lo, hi), parents=(a,), backward_fn=bwd)


def log(a):
    a = as_var(a)

    def bwd(g):
        a.accumulate(g / a.data)

    return Var(np.log(a.data), parents=(a,), backward_fn=bwd)


def softmax(a):
    """Softmax over the last axis."""
    a = as_var(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        a.accumulate(y * (g - dot))

    return Var(y, parents=(a,), backward_fn=bwd)


# ---------------------------------------------------------------------------
# matrix product


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree {a.data.shape} x {b.data.shape}")
    out = _backend.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_backend.matmul_nt(g, b.data))
        if b.requires_grad:
            b.accumulate(_backend.matmul_tn(a.data, g))

    return Var(out, parents=(a, b), backward_fn=bwd)


# ---------------------------------------------------------------------------
# graph-normalization pieces


def zero_diag(a):
    """Force the diagonal of a square matrix to zero."""
    a = as_var(a)
    n = a.data.shape[0]
    if a.data.ndim != 2 or a.data.shape[1] != n:
        raise ShapeError(f"zero_diag: expected square matrix, got {a.data.shape}")
    mask = 1.0 - np.eye(n, dtype=a.data.dtype)
    return mul_const(a, mask)


def safe_reciprocal(d):
    """1/d where d > 0, exactly 0 elsewhere (isolated-node guard)."""
    d = as_var(d)
    y = np.zeros_like(d.data)
    np.divide(1.0, d.data, out=y, where=d.data > 0)

    def bwd(g):
        d.accumulate(-g * y * y)

    return Var(y, parents=(d,), backward_fn=bwd)


def safe_rsqrt(d):
    """d**-0.5 where d > 0, exactly 0 elsewhere."""
    d = as_var(d)
    y = np.zeros_like(d.data)
    np.divide(1.0, np.sqrt(d.data, out=np.zeros_like(d.data), where=d.data > 0),
              out=y, where=d.data > 0)

    def bwd(g):
        d.accumulate(-0.5 * g * y * y * y)

    return Var(y, parents=(d,), backward_fn=bwd)


def scale_rows(a, r):
    """Multiply row i of a matrix by r[i]."""
    a, r = as_var(a), as_var(r)
    if a.data.shape[0] != r.data.shape[0] or r.data.ndim != 1:
        raise ShapeError(f"scale_rows: {a.data.shape} by {r.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * r.data[:, None])
        if r.requires_grad:
            r.accumulate((g * a.data).sum(axis=1))

    return Var(a.data * r.data[:, None], parents=(a, r), backward_fn=bwd)


def scale_cols(a, r):
    """Multiply column j of a matrix by r[j]."""
    a, r = as_var(a), as_var(r)
    if a.data.shape[1] != r.data.shape[0] or r.data.ndim != 1:
        raise ShapeError(f"scale_cols: {a.data.shape} by {r.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * r.data[None, :])
        if r.requires_grad:
            r.accumulate((g * a.data).sum(axis=0))

    return Var(a.data * r.data[None, :], parents=(a, r), backward_fn=bwd)


def take_pairs(m, rows, cols):
    """Gather m[rows[e], cols[e]] into a vector of edge weights."""
    m = as_var(m)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def bwd(g):
        buf = np.zeros_like(m.data)
        np.add.at(buf, (rows, cols), g)
        m.accumulate(buf)

    return Var(np.array(m.data[rows, cols]), parents=(m,), backward_fn=bwd)


@dataclass(frozen=True)
class EdgeIndex:
    """CSR-style edge structure: row i owns edges indptr[i]:indptr[i+1]."""

    n_rows: int
    indptr: np.ndarray   # int64, n_rows + 1
    cols: np.ndarray     # int64, target node per edge
    src: np.ndarray      # int64, source row per edge (expanded indptr)

    @staticmethod
    def from_edges(n_rows, src, cols):
        """Build from edge arrays sorted by (src, col)."""
        src = np.asarray(src, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        counts = np.bincount(src, minlength=n_rows)
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return EdgeIndex(n_rows=int(n_rows), indptr=indptr, cols=cols, src=src)

    @property
    def n_edges(self):
        return int(self.cols.shape[0])


def edge_gather(z, index, w):
    """out[i] = sum over edges e of row i of w[e] * z[cols[e]].

    ``w`` may be a Var (weighted edges; gradients flow into the weights)
    or a plain array (constant weights, e.g. the local grid edges).
    """
    z = as_var(z)
    w_var = w if isinstance(w, Var) else None
    w_data = w.data if w_var is not None else np.asarray(w, dtype=z.data.dtype)
    if w_data.shape[0] != index.n_edges:
        raise ShapeError(f"edge_gather: {w_data.shape[0]} weights for {index.n_edges} edges")
    out = _backend.edge_gather_sum(index.indptr, index.cols, w_data, z.data)
    parents = (z, w_var) if w_var is not None else (z,)

    def bwd(g):
        if z.requires_grad:
            z.accumulate(_backend.edge_scatter_sum(index.src, index.cols, w_data, g,
                                                   z.data.shape[0]))
        if w_var is not None and w_var.requires_grad:
            w_var.accumulate(_backend.edge_weight_grad(index.src, index.cols, g, z.data))

    return Var(out, parents=parents, backward_fn=bwd)


# ---------------------------------------------------------------------------
# network layers (NHWC)


def _im2col(x, k):
    """Patches of a padded NHWC array -> (B*H*W, k*k*C) matrix."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    b, hp, wp, c = xp.shape
    h, w = hp - 2 * p, wp - 2 * p
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(b, h, w, k, k, c), strides=(s[0], s[1], s[2], s[1], s[2], s[3]))
    return np.ascontiguousarray(view).reshape(b * h * w, k * k * c)


def _col2im(dcols, b, h, w, c, k):
    """Adjoint of _im2col, accumulated straight into the unpadded shape."""
    p = k // 2
    dx = np.zeros((b, h, w, c), dtype=dcols.dtype)
    # one strided pass up front so the per-tap reads below are contiguous
    d6 = np.ascontiguousarray(
        dcols.reshape(b, h, w, k, k, c).transpose(3, 4, 0, 1, 2, 5))
    for ky in range(k):
        y0, y1 = max(0, p - ky), min(h, h + p - ky)
        for kx in range(k):
            x0, x1 = max(0, p - kx), min(w, w + p - kx)
            dx[:, y0 + ky - p:y1 + ky - p, x0 + kx - p:x1 + kx - p, :] += \
                d6[ky, kx, :, y0:y1, x0:x1, :]
    return dx


def conv2d(x, w, bias=None, ksize=3):
    """Same-padding stride-1 convolution; w is (k*k*Cin, Cout)."""
    x, w = as_var(x), as_var(w)
    b, h, wd, cin = x.data.shape
    if w.data.shape[0] != ksize * ksize * cin:
        raise ShapeError(f"conv2d: weight rows {w.data.shape[0]} != k*k*Cin "
                         f"{ksize * ksize * cin}")
    cout = w.data.shape[1]
    cols = (x.data.reshape(b * h * wd, cin) if ksize == 1 else _im2col(x.data, ksize))
    ym = _backend.matmul(cols, w.data)
    if bias is not None:
        bias = as_var(bias)
        ym = ym + bias.data
    out = ym.reshape(b, h, wd, cout)
    parents = (x, w) + ((bias,) if bias is not None else ())

    def bwd(g):
        gm = np.ascontiguousarray(g.reshape(b * h * wd, cout))
        if bias is not None and bias.requires_grad:
            bias.accumulate(gm.sum(axis=0))
        if w.requires_grad:
            w.accumulate(_backend.matmul_tn(cols, gm))
        if x.requires_grad:
            dcols = _backend.matmul_nt(gm, w.data)
            if ksize == 1:
                x.accumulate(dcols.reshape(b, h, wd, cin))
            else:
                x.accumulate(_col2im(dcols, b, h, wd, cin, ksize))

    return Var(out, parents=parents, backward_fn=bwd)


def maxpool2(x):
    """2x2 stride-2 max pooling; ties resolved to the first window slot."""
    x = as_var(x)
    b, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = np.ascontiguousarray(x.data.reshape(b, h2, 2, w2, 2, c)
                               .transpose(0, 1, 3, 5, 2, 4)).reshape(b, h2, w2, c, 4)
    out = win.max(axis=-1)

    def bwd(g):
        idx = win.argmax(axis=-1)  # first max wins (deterministic ties)
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = (dwin.reshape(b, h2, w2, c, 2, 2)
              .transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c))
        x.accumulate(np.ascontiguousarray(dx))

    return Var(out, parents=(x,), backward_fn=bwd)


UPSAMPLE_FACTORS = (2, 4, 8)


def _axis_lerp(n_in, factor, dtype):
    """Source indices and blend weights for 1-d bilinear resizing."""
    src = (np.arange(n_in * factor, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (src - i0).astype(dtype)
    return i0, i1, w


_ADJOINT_CACHE = {}


def _axis_adjoint(n_in, factor, dtype):
    """Transposed interpolation matrix (in x out) for the backward pass."""
    key = (n_in, factor, np.dtype(dtype).str)
    if key not in _ADJOINT_CACHE:
        i0, i1, w = _axis_lerp(n_in, factor, np.float64)
        n_out = n_in * factor
        m = np.zeros((n_out, n_in))
        m[np.arange(n_out), i0] += 1.0 - w
        m[np.arange(n_out), i1] += w
        _ADJOINT_CACHE[key] = np.ascontiguousarray(m.T.astype(dtype))
    return _ADJOINT_CACHE[key]


def upsample_bilinear(x, factor):
    """Bilinear upsample (align_corners=False); constants pass through exactly."""
    x = as_var(x)
    if factor not in UPSAMPLE_FACTORS:
        raise ValidationError(f"upsample_bilinear: factor must be one of "
                              f"{UPSAMPLE_FACTORS}, got {factor}")
    b, h, w, c = x.data.shape
    y0, y1, wy = _axis_lerp(h, factor, x.data.dtype)
    x0, x1, wx = _axis_lerp(w, factor, x.data.dtype)

    # lerp form a + w*(b-a) keeps constant inputs bitwise constant
    rows_a = x.data[:, y0]
    mid = rows_a + wy[None, :, None, None] * (x.data[:, y1] - rows_a)
    cols_a = mid[:, :, x0]
    out = cols_a + wx[None, None, :, None] * (mid[:, :, x1] - cols_a)

    def bwd(g):
        # two dense adjoint contractions (same coefficients as the lerp)
        adj_h = _axis_adjoint(h, factor, x.data.dtype)   # (h, h*f)
        adj_w = _axis_adjoint(w, factor, x.data.dtype)   # (w, w*f)
        gmid = np.matmul(adj_h, g.reshape(b, h * factor, -1)).reshape(
            b, h, w * factor, c)
        dx = np.tensordot(gmid, adj_w, axes=([2], [1])).transpose(0, 1, 3, 2)
        x.accumulate(np.ascontiguousarray(dx))

    return Var(out, parents=(x,), backward_fn=bwd)


BN_EPS = 1e-5


def batchnorm_train(x, gamma, beta, eps=BN_EPS):
    """Batch norm over (batch, height, width) per channel, training mode.

    Returns (y, batch_mean, batch_var); the caller owns the running-stat
    update. Variance is the biased (population) estimate.
    """
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    axes = (0, 1, 2)
    flat = x.data.reshape(-1, x.data.shape[-1])
    m = flat.shape[0]
    mu = flat.mean(axis=0)
    centered = x.data - mu
    cflat = centered.reshape(-1, centered.shape[-1])
    var = np.einsum("mc,mc->c", cflat, cflat) / m
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = centered * inv
    y = gamma.data * xhat + beta.data

    def bwd(g):
        gflat = np.ascontiguousarray(g.reshape(m, -1))
        g_sum = gflat.sum(axis=0)
        g_dot = np.einsum("mc,mc->c", gflat,
                          np.ascontiguousarray(xhat.reshape(m, -1)))
        if beta.requires_grad:
            beta.accumulate(g_sum)
        if gamma.requires_grad:
            gamma.accumulate(g_dot)
        if x.requires_grad:
            # compact form: dx = gamma*inv/m * (m*g - sum(g) - xhat*sum(g*xhat))
            coeff = gamma.data * inv / m
            x.accumulate(coeff * (m * g - g_sum - xhat * g_dot))

    return Var(y, parents=(x, gamma, beta), backward_fn=bwd), mu, var


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps=BN_EPS):
    """Batch norm with frozen running statistics (pure affine per channel)."""
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    inv = (1.0 / np.sqrt(running_var + eps)).astype(x.data.dtype)
    xhat = (x.data - running_mean) * inv

    def bwd(g):
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=(0, 1, 2)))
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=(0, 1, 2)))
        if x.requires_grad:
            x.accumulate(g * (gamma.data * inv))

    return Var(gamma.data * xhat + beta.data, parents=(x, gamma, beta),
               backward_fn=bwd)


# ---------------------------------------------------------------------------
# losses

PROB_CLAMP = 1e-7
DICE_EPS = 1e-5


def bce_loss(probs, target):
    """Mean binary cross-entropy; probs clamped to [1e-7, 1-1e-7]."""
    probs = as_var(probs)
    target = np.asarray(target, dtype=probs.data.dtype)
    if target.shape != probs.data.shape:
        raise ShapeError(f"bce_loss: {probs.data.shape} vs target {target.shape}")
    inside = (probs.data > PROB_CLAMP) & (probs.data < 1.0 - PROB_CLAMP)
    p = np.clip(probs.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    value = -(target * np.log(p) + (1.0 - target) * np.log1p(-p)).mean()

    def bwd(g):
        probs.accumulate(g * inside * ((1.0 - target) / (1.0 - p) - target / p)
                         / target.size)

    return Var(np.asarray(value, dtype=probs.data.dtype), parents=(probs,),
               backward_fn=bwd)


def cross_entropy(probs, target):
    """Mean categorical cross-entropy over pixels (target one-hot)."""
    probs = as_var(probs)
    target = np.asarray(target, dtype=probs.data.dtype)
    if target.shape != probs.data.shape:
        raise ShapeError(f"cross_entropy: {probs.data.shape} vs target {target.shape}")
    n_pixels = int(np.prod(target.shape[:-1]))
    inside = probs.data > PROB_CLAMP
    p = np.clip(probs.data, PROB_CLAMP, None)
    value = -(target * np.log(p)).sum() / n_pixels

    def bwd(g):
        probs.accumulate(g * inside * (-target / p) / n_pixels)

    return Var(np.asarray(value, dtype=probs.data.dtype), parents=(probs,),
               backward_fn=bwd)


def dice_loss(probs, target, eps=DICE_EPS):
    """Soft Dice loss, averaged over the classes present in the target.

    Per class: 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps). When the
    target contains no class at all the average runs over every channel
    instead (degenerate all-background case).
    """
    probs = as_var(probs)
    target = np.asarray(target, dtype=probs.data.dtype)
    if target.shape != probs.data.shape:
        raise ShapeError(f"dice_loss: {probs.data.shape} vs target {target.shape}")
    n_classes = target.shape[-1]
    p2 = probs.data.reshape(-1, n_classes)
    t2 = target.reshape(-1, n_classes)
    t_sums = t2.sum(axis=0)
    present = np.flatnonzero(t_sums > 0)
    if present.size == 0:
        present = np.arange(n_classes)
    inter = np.einsum("ic,ic->c", p2, t2)
    p_sums = p2.sum(axis=0)
    numer = 2.0 * inter[present] + eps
    denom = p_sums[present] + t_sums[present] + eps
    value = np.mean(1.0 - numer / denom)

    def bwd(g):
        dp = np.zeros_like(p2)
        coeff = g / present.size
        for out_c, c in enumerate(present):
            # d/dp of -(2I+eps)/D: (2I+eps)/D^2 - 2t/D
            dp[:, c] = coeff * (numer[out_c] / denom[out_c] ** 2
                                - 2.0 * t2[:, c] / denom[out_c])
        probs.accumulate(dp.reshape(probs.data.shape))

    return Var(np.asarray(value, dtype=probs.data.dtype), parents=(probs,),
               backward_fn=bwd)
