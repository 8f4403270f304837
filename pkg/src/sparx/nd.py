"""Dense n-d tensor engine with reverse-mode differentiation.

Tensors wrap row-major contiguous numpy arrays (float32 or float64) and
optionally participate in a recording ``Tape``. Operations are pure: given the
same inputs they produce bit-identical outputs. Every op validates shapes up
front and checks its output for NaN/Inf, so non-finite values surface as
errors at the op that produced them instead of propagating silently.

The op surface is deliberately small: exactly the primitives the backbone
needs (matmul/batched matmul, channel concat/split, depthwise and dense
convolution via patch extraction, pooling, softmax, layernorm, a handful of
pointwise nonlinearities, and an input-dependent selective scan). Broadcasting
is supported only where these ops require it (bias adds and attention-bias
adds); there is no general-rank broadcasting.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf as _np_erf


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf, or was fed numerically invalid input."""


class TapeError(RuntimeError):
    """Invalid use of a recording tape (mixed tapes, non-scalar loss, ...)."""


_FLOAT_DTYPES = (np.float32, np.float64)


class _Node:
    """One recorded primitive: input handles plus a vector-Jacobian product."""

    __slots__ = ("op", "inputs", "vjp", "is_leaf", "shape", "dtype")

    def __init__(self, op, inputs, vjp, is_leaf, shape, dtype):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.is_leaf = is_leaf
        self.shape = shape
        self.dtype = dtype


class Tape:
    """Append-only record of ops in execution order.

    Node indices are handles. Because ops append at execution time, the node
    list is always topologically sorted: every node's inputs precede it.
    A tape has a single owner; do not share one across concurrent recordings.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def _record(self, op, inputs, vjp, shape, dtype, is_leaf=False):
        self.nodes.append(_Node(op, inputs, vjp, is_leaf, shape, dtype))
        return len(self.nodes) - 1

    def leaf(self, data, dtype=None):
        """Register ``data`` as a differentiable leaf (parameter) tensor."""
        arr = _validate_array(data, dtype)
        nid = self._record("leaf", (), None, arr.shape, arr.dtype, is_leaf=True)
        return Tensor(arr, self, nid)

    def __len__(self):
        return len(self.nodes)


def _validate_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32 if dtype is None else dtype)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Dense row-major array, optionally linked to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        self.data = _validate_array(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, taped={self.tape is not None})"


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(op, *ts):
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _apply(op, out, inputs, vjp):
    """Finalize an op: finiteness check, tape wiring, output wrapping."""
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    if not (out.flags["C_CONTIGUOUS"] if isinstance(out, np.ndarray) else False):
        out = np.asarray(out, order="C")
    tapes = {t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise TapeError(f"{op}: inputs come from different tapes")
    tape = tapes.pop()
    ids = tuple(t.node if t.tape is tape else -1 for t in inputs)
    nid = tape._record(op, ids, vjp, out.shape, out.dtype)
    return Tensor(out, tape, nid)


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_dtype("add", a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _apply("add", out, (a, b), vjp)


def sub(a, b):
    return add(a, neg(b))


def neg(a):
    a = _as_tensor(a)
    return _apply("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_dtype("mul", a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _apply("mul", out, (a, b), vjp)


def scale(a, s: float):
    """Multiply by a python scalar."""
    a = _as_tensor(a)
    s = a.dtype.type(s)
    return _apply("scale", a.data * s, (a,), lambda g: (g * s,))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _apply("matmul", ad @ bd, (a, b), vjp)


def pointwise_linear(x, weight, bias=None):
    """Channel projection of (Cin, N) tokens: weight (Cout, Cin) @ x + bias."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"pointwise_linear: expects 2-d operands, got {weight.shape} @ {x.shape}")
    out = matmul(weight, x)
    if bias is not None:
        bias = _as_tensor(bias, like=x)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"pointwise_linear: bias {bias.shape} does not match fan-out {weight.shape[0]}")
        out = add(out, reshape(bias, (weight.shape[0], 1)))
    return out


def bmm(a, b):
    """Batched matmul over the leading axis: (B,m,k) @ (B,k,n) -> (B,m,n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype("bmm", a, b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm: expects 3-d operands, got {a.shape} @ {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _apply("bmm", ad @ bd, (a, b), vjp)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    in_shape = a.shape
    return _apply("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(in_shape),))


def permute(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply("permute", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    """Concatenate along ``axis``; all other dims must match exactly."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    _check_same_dtype("concat", *ts)
    ref = list(ts[0].shape)
    for t in ts[1:]:
        cur = list(t.shape)
        if len(cur) != len(ref) or any(c != r for i, (c, r) in enumerate(zip(cur, ref)) if i != axis):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ts[0].shape} on axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
                     for i in range(len(sizes)))

    return _apply("concat", np.concatenate([t.data for t in ts], axis=axis), ts, vjp)


def slice_axis(a, axis, start, stop):
    a = _as_tensor(a)
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_axis: [{start}:{stop}) out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    in_shape, in_dtype = a.shape, a.dtype

    def vjp(g):
        z = np.zeros(in_shape, dtype=in_dtype)
        z[idx] = g
        return (z,)

    return _apply("slice", a.data[idx].copy(), (a,), vjp)


def split(a, parts, axis=0):
    """Split into ``parts`` equal segments along ``axis``; inverse of concat."""
    a = _as_tensor(a)
    n = a.shape[axis]
    if n % parts != 0:
        raise ShapeError(f"split: axis {axis} of {a.shape} not divisible into {parts} parts")
    step = n // parts
    return tuple(slice_axis(a, axis, i * step, (i + 1) * step) for i in range(parts))


def flip_last(a):
    """Reverse the last axis (sequence reversal for scans)."""
    a = _as_tensor(a)
    return _apply("flip", a.data[..., ::-1].copy(), (a,), lambda g: (g[..., ::-1].copy(),))


def roll2d(a, shift_h, shift_w):
    """Cyclic shift of the two trailing spatial axes of a (C,H,W) tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 3:
        raise ShapeError(f"roll2d: expects (C,H,W), got {a.shape}")
    out = np.roll(a.data, (shift_h, shift_w), axis=(1, 2))

    def vjp(g):
        return (np.roll(g, (-shift_h, -shift_w), axis=(1, 2)),)

    return _apply("roll2d", out, (a,), vjp)


def pad_spatial(a, pad_h, pad_w):
    """Zero-pad the spatial axes of (C,H,W); pads are (before, after) pairs."""
    a = _as_tensor(a)
    if a.data.ndim != 3:
        raise ShapeError(f"pad_spatial: expects (C,H,W), got {a.shape}")
    (ht, hb), (wl, wr) = pad_h, pad_w
    out = np.pad(a.data, ((0, 0), (ht, hb), (wl, wr)))
    H, W = a.shape[1], a.shape[2]

    def vjp(g):
        return (g[:, ht:ht + H, wl:wl + W].copy(),)

    return _apply("pad_spatial", out, (a,), vjp)


def crop_spatial(a, h, w):
    """Keep the top-left h x w spatial region of (C,H,W)."""
    a = _as_tensor(a)
    if a.data.ndim != 3:
        raise ShapeError(f"crop_spatial: expects (C,H,W), got {a.shape}")
    if h > a.shape[1] or w > a.shape[2]:
        raise ShapeError(f"crop_spatial: target ({h},{w}) exceeds {a.shape}")
    in_shape, in_dtype = a.shape, a.dtype

    def vjp(g):
        z = np.zeros(in_shape, dtype=in_dtype)
        z[:, :h, :w] = g
        return (z,)

    return _apply("crop_spatial", a.data[:, :h, :w].copy(), (a,), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a):
    a = _as_tensor(a)
    in_shape, in_dtype = a.shape, a.dtype

    def vjp(g):
        return (np.full(in_shape, g, dtype=in_dtype),)

    return _apply("sum_all", np.asarray(a.data.sum(), dtype=a.dtype), (a,), vjp)


def sum_axis(a, axis, keepdims=False):
    a = _as_tensor(a)
    in_shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _apply("sum_axis", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean_axis(a, axis, keepdims=False):
    a = _as_tensor(a)
    n = a.shape[axis]
    if n == 0:
        raise ShapeError(f"mean_axis: empty reduction axis {axis} of {a.shape}")
    return scale(sum_axis(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _apply("exp", out, (a,), lambda g: (g * out,))


def softplus(a):
    """log(1 + e^x), computed stably."""
    a = _as_tensor(a)
    out = np.logaddexp(a.dtype.type(0), a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _apply("softplus", out, (a,), lambda g: (g * sig,))


def silu(a):
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    ad = a.data

    def vjp(g):
        return (g * (sig * (1.0 + ad * (1.0 - sig))),)

    return _apply("silu", ad * sig, (a,), vjp)


def gelu(a):
    """Exact (erf-based) Gaussian error linear unit."""
    a = _as_tensor(a)
    ad = a.data
    inner = _np_erf(ad / np.sqrt(2.0)).astype(ad.dtype)
    out = 0.5 * ad * (1.0 + inner)
    inv_sqrt2pi = 1.0 / np.sqrt(2.0 * np.pi)

    def vjp(g):
        pdf = np.exp(-0.5 * ad * ad) * inv_sqrt2pi
        return (g * (0.5 * (1.0 + inner) + ad * pdf),)

    return _apply("gelu", out, (a,), vjp)


def softmax_lastdim(a):
    """Softmax over the last axis, max-subtracted for stability."""
    a = _as_tensor(a)
    if a.shape[-1] == 0:
        raise ShapeError("softmax_lastdim: empty reduction axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _apply("softmax", out, (a,), vjp)


def layernorm_channels(x, gamma, beta, eps=1e-6):
    """Normalize each column of (C,N) over the channel axis, then affine."""
    x = _as_tensor(x)
    gamma, beta = _as_tensor(gamma, like=x), _as_tensor(beta, like=x)
    if x.data.ndim != 2:
        raise ShapeError(f"layernorm_channels: expects (C,N), got {x.shape}")
    C = x.shape[0]
    if C < 1:
        raise ShapeError("layernorm_channels: empty channel axis")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layernorm_channels: affine shapes {gamma.shape}/{beta.shape} do not match C={C}")
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = gamma.data[:, None] * xhat + beta.data[:, None]
    gd = gamma.data

    def vjp(g):
        dgamma = (g * xhat).sum(axis=1)
        dbeta = g.sum(axis=1)
        dxhat = g * gd[:, None]
        dx = inv / C * (C * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    return _apply("layernorm", out, (x, gamma, beta), vjp)


def cross_entropy_logits(logits, label):
    """Softmax cross-entropy of a single logit vector against an int label."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy_logits: expects 1-d logits, got {logits.shape}")
    label = int(label)
    if not 0 <= label < logits.shape[0]:
        raise ShapeError(f"cross_entropy_logits: label {label} out of range for {logits.shape}")
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    loss = np.asarray(lse - z[label], dtype=logits.dtype)
    probs = np.exp(z - lse)

    def vjp(g):
        d = probs.copy()
        d[label] -= 1.0
        return (g * d,)

    return _apply("cross_entropy", loss, (logits,), vjp)


# ---------------------------------------------------------------------------
# convolution building blocks
# ---------------------------------------------------------------------------

def extract_patches(x, kernel, stride=1, pad=0):
    """im2col for (C,H,W): returns (C, kernel*kernel, P) patch columns.

    P is the number of output positions. Every output position's receptive
    field is laid out row-major along axis 1; channels stay separate so both
    dense and depthwise convolutions can be built on top.
    """
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"extract_patches: expects (C,H,W), got {x.shape}")
    C, H, W = x.shape
    k, s, p = int(kernel), int(stride), int(pad)
    Hp, Wp = H + 2 * p, W + 2 * p
    if Hp < k or Wp < k:
        raise ShapeError(f"extract_patches: spatial dims {x.shape} smaller than kernel {k}")
    Ho = (Hp - k) // s + 1
    Wo = (Wp - k) // s + 1
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    sc, sh, sw = xp.strides
    view = as_strided(xp, shape=(C, Ho, Wo, k, k), strides=(sc, sh * s, sw * s, sh, sw))
    out = np.ascontiguousarray(view.transpose(0, 3, 4, 1, 2).reshape(C, k * k, Ho * Wo))

    def vjp(g):
        gp = np.zeros((C, Hp, Wp), dtype=g.dtype)
        gk = g.reshape(C, k, k, Ho, Wo)
        for i in range(k):
            for j in range(k):
                gp[:, i:i + Ho * s:s, j:j + Wo * s:s] += gk[:, i, j]
        return (gp[:, p:p + H, p:p + W].copy() if p else gp,)

    return _apply("extract_patches", out, (x,), vjp)


def _conv_out_hw(shape, kernel, stride, pad):
    _, H, W = shape
    return (H + 2 * pad - kernel) // stride + 1, (W + 2 * pad - kernel) // stride + 1


def dwconv(x, weight, bias=None, stride=1, pad=0):
    """Depthwise 2-d convolution; channel i of the output sees only channel i."""
    x = _as_tensor(x)
    weight = _as_tensor(weight, like=x)
    C = x.shape[0]
    if weight.data.ndim != 3 or weight.shape[0] != C or weight.shape[1] != weight.shape[2]:
        raise ShapeError(f"dwconv: kernel {weight.shape} does not match input channels {x.shape}")
    k = weight.shape[1]
    if stride > 1 and ((x.shape[1] + 2 * pad - k) % stride or (x.shape[2] + 2 * pad - k) % stride):
        raise ShapeError(f"dwconv: stride {stride} does not evenly reduce {x.shape} with kernel {k}")
    Ho, Wo = _conv_out_hw(x.shape, k, stride, pad)
    patches = extract_patches(x, k, stride, pad)
    out = bmm(reshape(weight, (C, 1, k * k)), patches)
    out = reshape(out, (C, Ho, Wo))
    if bias is not None:
        bias = _as_tensor(bias, like=x)
        out = add(out, reshape(bias, (C, 1, 1)))
    return out


def dwconv3x3_pad1(x, weight, bias=None):
    """3x3 depthwise convolution with padding 1; preserves H and W."""
    return dwconv(x, weight, bias, stride=1, pad=1)


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Dense 2-d convolution, weight shaped (Cout, Cin, k, k)."""
    x = _as_tensor(x)
    weight = _as_tensor(weight, like=x)
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (Cout,Cin,k,k), got {weight.shape}")
    Cout, Cin, k, k2 = weight.shape
    if k != k2 or Cin != x.shape[0]:
        raise ShapeError(f"conv2d: weight {weight.shape} does not match input {x.shape}")
    Ho, Wo = _conv_out_hw(x.shape, k, stride, pad)
    patches = reshape(extract_patches(x, k, stride, pad), (Cin * k * k, Ho * Wo))
    out = matmul(reshape(weight, (Cout, Cin * k * k)), patches)
    if bias is not None:
        bias = _as_tensor(bias, like=x)
        out = add(out, reshape(bias, (Cout, 1)))
    return reshape(out, (Cout, Ho, Wo))


def avgpool_stride(x, stride):
    """Non-overlapping average pooling; stride must divide both spatial dims."""
    x = _as_tensor(x)
    C, H, W = x.shape
    s = int(stride)
    if H % s or W % s:
        raise ShapeError(f"avgpool_stride: stride {s} does not divide spatial dims of {x.shape}")
    patches = extract_patches(x, s, s, 0)
    return reshape(mean_axis(patches, axis=1), (C, H // s, W // s))


def gather_rows(table, index):
    """Row lookup out[i] = table[index[i]]; index is a fixed int array."""
    table = _as_tensor(table)
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-d, got {table.shape}")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ShapeError(f"gather_rows: index out of range for table {table.shape}")
    tshape, tdtype = table.shape, table.dtype

    def vjp(g):
        z = np.zeros(tshape, dtype=tdtype)
        np.add.at(z, idx, g)
        return (z,)

    return _apply("gather_rows", table.data[idx], (table,), vjp)


# ---------------------------------------------------------------------------
# selective scan
# ---------------------------------------------------------------------------

def selective_scan(x, delta, a, b, c, d):
    """Input-dependent linear state recurrence along the last axis.

    Shapes: x, delta (C,T); a (C,S); b, c (S,T); d (C,). Per channel and state,
        h_t = exp(delta_t * a) * h_{t-1} + delta_t * b_t * x_t,   h_0 = 0
        y_t = sum_s c_t[s] * h_t[s] + d * x_t
    The recurrence is causal: y_t depends only on x_{1..t}. delta must be
    strictly positive (produce it through softplus).
    """
    x, delta = _as_tensor(x), _as_tensor(delta)
    a, b, c, d = _as_tensor(a, like=x), _as_tensor(b, like=x), _as_tensor(c, like=x), _as_tensor(d, like=x)
    _check_same_dtype("selective_scan", x, delta, a, b, c, d)
    if x.data.ndim != 2:
        raise ShapeError(f"selective_scan: x must be (C,T), got {x.shape}")
    C, T = x.shape
    S = a.shape[1] if a.data.ndim == 2 else -1
    if a.shape != (C, S) or delta.shape != (C, T) or b.shape != (S, T) or c.shape != (S, T) or d.shape != (C,):
        raise ShapeError(
            f"selective_scan: inconsistent shapes x{x.shape} delta{delta.shape} a{a.shape} b{b.shape} c{c.shape} d{d.shape}")
    if np.any(delta.data <= 0):
        raise NumericError("selective_scan: delta must be strictly positive")

    xd, dl, ad, bd, cd, dd = x.data, delta.data, a.data, b.data, c.data, d.data
    decay = np.exp(dl[:, None, :] * ad[:, :, None])          # (C,S,T)
    drive = (dl * xd)[:, None, :] * bd[None, :, :]           # (C,S,T)
    hs = np.empty((C, S, T), dtype=xd.dtype)
    h = np.zeros((C, S), dtype=xd.dtype)
    for t in range(T):
        h = decay[:, :, t] * h + drive[:, :, t]
        hs[:, :, t] = h
    y = np.einsum("cst,st->ct", hs, cd) + dd[:, None] * xd

    def vjp(g):
        gx = g * dd[:, None]
        gd_skip = (g * xd).sum(axis=1)
        gc = np.einsum("ct,cst->st", g, hs)
        gdelta = np.zeros_like(dl)
        ga = np.zeros_like(ad)
        gb = np.zeros_like(bd)
        gh = np.zeros((C, S), dtype=xd.dtype)
        for t in range(T - 1, -1, -1):
            gh = gh + g[:, t:t + 1] * cd[:, t][None, :]
            hprev = hs[:, :, t - 1] if t > 0 else np.zeros((C, S), dtype=xd.dtype)
            gdecay = gh * hprev
            gdelta[:, t] += (gdecay * decay[:, :, t] * ad).sum(axis=1)
            ga += gdecay * decay[:, :, t] * dl[:, t][:, None]
            gdrive = gh
            gdelta[:, t] += (gdrive * bd[None, :, t]).sum(axis=1) * xd[:, t]
            gx[:, t] += (gdrive * bd[None, :, t]).sum(axis=1) * dl[:, t]
            gb[:, t] += (gdrive * (dl[:, t] * xd[:, t])[:, None]).sum(axis=0)
            gh = gh * decay[:, :, t]
        return gx, gdelta, ga, gb, gc, gd_skip

    return _apply("selective_scan", y, (x, delta, a, b, c, d), vjp)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def backward(tape, loss):
    """Reverse sweep from a scalar loss; returns {leaf node id: grad Tensor}.

    Every leaf registered on the tape appears in the result; leaves the loss
    does not reach map to zero tensors of the leaf's shape.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape or loss.node is None:
        raise TapeError("backward: loss is not recorded on this tape")
    if loss.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape, dtype=loss.dtype)}
    for nid in range(loss.node, -1, -1):
        node = tape.nodes[nid]
        if node.is_leaf:
            continue
        g = grads.pop(nid, None)
        if g is None:
            continue
        for in_id, gin in zip(node.inputs, node.vjp(g)):
            if in_id < 0 or gin is None:
                continue
            acc = grads.get(in_id)
            grads[in_id] = gin if acc is None else acc + gin
    out = {}
    for nid, node in enumerate(tape.nodes):
        if node.is_leaf:
            g = grads.get(nid)
            out[nid] = Tensor(g if g is not None else np.zeros(node.shape, dtype=node.dtype))
    return out


def grad_check(f, params, h=1e-4, rng=None, max_elements=None):
    """Max relative error between tape gradients and central differences.

    ``f`` takes one Tensor per entry of ``params`` and returns a scalar
    Tensor; it must be deterministic. Checks run in float64. When
    ``max_elements`` is given, a random subset of parameter elements is
    checked (seeded through ``rng``). The relative error per element is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    arrays = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = f(*leaves)
    grads = backward(tape, loss)
    analytic = [grads[leaf.node].data for leaf in leaves]

    coords = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    if max_elements is not None and len(coords) > max_elements:
        rng = rng if rng is not None else np.random.default_rng(0)
        chosen = rng.choice(len(coords), size=max_elements, replace=False)
        coords = [coords[int(k)] for k in sorted(chosen)]

    def eval_at(arrs):
        val = f(*[Tensor(a) for a in arrs])
        return float(val.data.reshape(-1)[0])

    worst = 0.0
    for i, j in coords:
        orig = arrays[i].flat[j]
        arrays[i].flat[j] = orig + h
        fp = eval_at(arrays)
        arrays[i].flat[j] = orig - h
        fm = eval_at(arrays)
        arrays[i].flat[j] = orig
        numeric = (fp - fm) / (2.0 * h)
        ana = analytic[i].flat[j]
        rel = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
        worst = max(worst, rel)
    return worst
