"""Multi-layer channel aggregation with grouped channel cross-attention.

A ganglion layer's current feature ``x`` (C,N) queries a stack of earlier
features ``ys`` (each C,N). The earlier features are concatenated, projected
to 2C and split into a key source and a value source. Channel-to-channel
attention is computed within ``groups`` channel groups between spatially
reduced query/key, so the attention map is (G, C/G, C/G) regardless of how
many tokens the map has; the value keeps full resolution. The output
concatenates x, the value source, and the attended feature, projected to 2C.

Spatial reduction uses strided depthwise convolutions whose stride s
satisfies s*s = r, chosen so N/r matches the token count of the network's
final stage.

Ablation modes:
* ``concat``: single linear over cat(x, ys...), no attention.
* ``no_cgca``: value branch only; output fuses cat(x, value source).
* ``no_sr``: full pipeline with identity reducers (r = 1).
* ``no_skip``: output projects the attended feature alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nd import (Tensor, bmm, concat, dwconv, permute, pointwise_linear, reshape,
                 scale, softmax_lastdim, split, ShapeError)
from .params import Initializer

DMCA_MODES = ("full", "concat", "no_cgca", "no_sr", "no_skip")


@dataclass
class DmcaParams:
    mode: str
    channels: int
    l_count: int
    groups: int
    reduce_stride: int
    mix_w: np.ndarray | None = None   # (2C, L*C); (C, L*C) in no_cgca
    mix_b: np.ndarray | None = None
    q_w: np.ndarray | None = None     # (C, C)
    q_b: np.ndarray | None = None
    k_w: np.ndarray | None = None
    k_b: np.ndarray | None = None
    v_w: np.ndarray | None = None
    v_b: np.ndarray | None = None
    out_w: np.ndarray | None = None   # (2C, fan-in); fan-in depends on mode
    out_b: np.ndarray | None = None
    q_red: np.ndarray | None = None   # (C, s, s) depthwise reducer, no bias
    k_red: np.ndarray | None = None


def init_dmca(init: Initializer, channels: int, l_count: int, reduce_stride: int,
              groups: int = 4, mode: str = "full") -> DmcaParams:
    C, L = channels, l_count
    if mode not in DMCA_MODES:
        raise ShapeError(f"unknown aggregation mode {mode!r}")
    if C % groups:
        raise ShapeError(f"channels {C} not divisible by groups {groups}")
    if L < 1:
        raise ShapeError("aggregation needs at least one source feature")
    s = 1 if mode == "no_sr" else int(reduce_stride)
    p = DmcaParams(mode=mode, channels=C, l_count=L, groups=groups, reduce_stride=s)
    if mode == "concat":
        p.out_w = init.trunc_normal((2 * C, (L + 1) * C))
        p.out_b = init.zeros((2 * C,))
        return p
    if mode == "no_cgca":
        p.mix_w = init.trunc_normal((C, L * C))
        p.mix_b = init.zeros((C,))
        p.out_w = init.trunc_normal((2 * C, 2 * C))
        p.out_b = init.zeros((2 * C,))
        return p
    p.mix_w = init.trunc_normal((2 * C, L * C))
    p.mix_b = init.zeros((2 * C,))
    p.q_w, p.q_b = init.trunc_normal((C, C)), init.zeros((C,))
    p.k_w, p.k_b = init.trunc_normal((C, C)), init.zeros((C,))
    p.v_w, p.v_b = init.trunc_normal((C, C)), init.zeros((C,))
    fan_in = C if mode == "no_skip" else 3 * C
    p.out_w = init.trunc_normal((2 * C, fan_in))
    p.out_b = init.zeros((2 * C,))
    if s > 1:
        p.q_red = init.trunc_normal((C, s, s))
        p.k_red = init.trunc_normal((C, s, s))
    return p


def group_channels(t: Tensor, groups: int) -> Tensor:
    """(C,N) -> (G, C/G, N) with contiguous channel groups."""
    C, N = t.shape
    if C % groups:
        raise ShapeError(f"channels {C} not divisible by groups {groups}")
    return reshape(t, (groups, C // groups, N))


def cgca_attention(q: Tensor, k: Tensor, scale_n: int) -> Tensor:
    """Grouped channel-to-channel attention map, softmaxed per row.

    q and k are (G, C/G, N/r); the map is (G, C/G, C/G): its size does not
    depend on the token count.
    """
    if q.shape != k.shape:
        raise ShapeError(f"attention: query {q.shape} and key {k.shape} differ")
    logits = scale(bmm(q, permute(k, (0, 2, 1))), 1.0 / math.sqrt(scale_n))
    return softmax_lastdim(logits)


def cgca(q: Tensor, k: Tensor, v: Tensor, scale_n: int) -> Tensor:
    """Attend value channels with the grouped map; returns (C,N)."""
    if v.shape[:2] != q.shape[:2]:
        raise ShapeError(f"attention: value groups {v.shape} do not match query {q.shape}")
    attn = cgca_attention(q, k, scale_n)
    z = bmm(attn, v)
    G, Cg, N = z.shape
    return reshape(z, (G * Cg, N))


def _reduce_tokens(t2d: Tensor, red: np.ndarray | Tensor | None, stride: int, hw) -> Tensor:
    if stride == 1:
        return t2d
    H, W = hw
    C = t2d.shape[0]
    if H % stride or W % stride:
        raise ShapeError(f"reducer stride {stride} does not divide spatial dims ({H},{W})")
    red_map = dwconv(reshape(t2d, (C, H, W)), red, stride=stride)
    return reshape(red_map, (C, (H // stride) * (W // stride)))


def _project(w, b, t):
    return pointwise_linear(t, w, b)


def dmca_forward(x: Tensor, ys: list, p: DmcaParams, hw) -> Tensor:
    """Aggregate earlier features into the current one; (C,N) -> (2C,N).

    ``ys`` must be ordered the way the mixing projection was built (the
    caller owns that ordering and keeps it fixed).
    """
    C, N = x.shape
    H, W = hw
    if H * W != N:
        raise ShapeError(f"spatial dims ({H},{W}) do not match token count {N}")
    if len(ys) != p.l_count:
        raise ShapeError(f"expected {p.l_count} source features, got {len(ys)}")
    for y in ys:
        if y.shape != x.shape:
            raise ShapeError(f"source feature {y.shape} does not match current {x.shape}")
    if C != p.channels:
        raise ShapeError(f"feature channels {C} do not match aggregator channels {p.channels}")
    r = p.reduce_stride * p.reduce_stride
    if N % r:
        raise ShapeError(f"token count {N} not divisible by reduction ratio {r}")

    if p.mode == "concat":
        return _project(p.out_w, p.out_b, concat([x] + list(ys), axis=0))

    cat_ys = concat(list(ys), axis=0)
    if p.mode == "no_cgca":
        yv = _project(p.mix_w, p.mix_b, cat_ys)
        return _project(p.out_w, p.out_b, concat([x, yv], axis=0))

    mixed = _project(p.mix_w, p.mix_b, cat_ys)
    yk, yv = split(mixed, 2, axis=0)
    q_in = _reduce_tokens(x, p.q_red, p.reduce_stride, hw)
    k_in = _reduce_tokens(yk, p.k_red, p.reduce_stride, hw)
    q = group_channels(_project(p.q_w, p.q_b, q_in), p.groups)
    k = group_channels(_project(p.k_w, p.k_b, k_in), p.groups)
    v = group_channels(_project(p.v_w, p.v_b, yv), p.groups)
    z = cgca(q, k, v, scale_n=N // r)
    if p.mode == "no_skip":
        return _project(p.out_w, p.out_b, z)
    return _project(p.out_w, p.out_b, concat([x, yv, z], axis=0))


def dmca_param_count(channels: int, l_count: int, reduce_stride: int,
                     mode: str = "full", bias: bool = True) -> int:
    """Closed-form parameter count; must agree with the built structures."""
    C, L = channels, l_count
    b = 1 if bias else 0
    s = 1 if mode == "no_sr" else reduce_stride
    if mode == "concat":
        return (L + 1) * C * 2 * C + b * 2 * C
    if mode == "no_cgca":
        return (L * C * C + b * C) + (2 * C * 2 * C + b * 2 * C)
    total = L * C * 2 * C + b * 2 * C          # mixing projection
    total += 3 * (C * C + b * C)               # query/key/value projections
    fan_in = C if mode == "no_skip" else 3 * C
    total += fan_in * 2 * C + b * 2 * C        # output projection
    if s > 1:
        total += 2 * s * s * C                 # depthwise reducers, no bias
    return total
