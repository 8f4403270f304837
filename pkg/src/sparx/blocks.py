"""Layer-level building blocks: position encoding, token mixers, feed-forward.

Every block maps (C,H,W) -> (C,H,W). Four interchangeable token mixers are
provided: a four-direction 2-d selective scan, a causal 1-d scan, a
bidirectional 1-d scan, and shifted window attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import nd
from .nd import (Tensor, add, bmm, crop_spatial, dwconv3x3_pad1, exp, flip_last,
                 gather_rows, gelu, matmul, neg, pad_spatial, permute, pointwise_linear,
                 reshape, roll2d, scale, selective_scan, slice_axis, softmax_lastdim,
                 softplus, layernorm_channels, ShapeError)
from .params import Initializer

MIXER_KINDS = ("ss2d", "ssm", "bissm", "window_attn")


def delta_rank(channels: int) -> int:
    """Rank of the low-rank step-size projection inside the scan mixers."""
    return max(1, math.ceil(channels / 8))


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class DpeParams:
    """Residual 3x3 depthwise convolution (dynamic position encoding)."""
    w: np.ndarray  # (C,3,3)
    b: np.ndarray  # (C,)


@dataclass
class SsmParams:
    """One scan direction of a selective state-space mixer.

    The state matrix is diagonal and strictly negative, A = -exp(a_log).
    The step size is produced from the token through a low-rank projection
    followed by softplus, so it is strictly positive.
    """
    a_log: np.ndarray     # (C, state)
    d: np.ndarray         # (C,) passthrough
    w_dt_in: np.ndarray   # (rank, C)
    b_dt_in: np.ndarray   # (rank,)
    w_dt_out: np.ndarray  # (C, rank)
    b_dt_out: np.ndarray  # (C,)
    w_b: np.ndarray       # (state, C)
    b_b: np.ndarray       # (state,)
    w_c: np.ndarray       # (state, C)
    b_c: np.ndarray       # (state,)


@dataclass
class WindowAttnParams:
    w_qkv: np.ndarray       # (3C, C)
    b_qkv: np.ndarray       # (3C,)
    w_out: np.ndarray       # (C, C)
    b_out: np.ndarray       # (C,)
    bias_table: np.ndarray  # ((2w-1)^2, heads)
    window: int
    heads: int
    shifted: bool = False


@dataclass
class ConvFfnParams:
    w1: np.ndarray  # (hidden, C) expand
    b1: np.ndarray
    dw: np.ndarray  # (hidden, 3, 3) depthwise between the two linears
    db: np.ndarray
    w2: np.ndarray  # (C, hidden) contract
    b2: np.ndarray


@dataclass
class VssBlockParams:
    mixer_kind: str
    mixer: object  # list[SsmParams] for scans, WindowAttnParams for attention
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    ffn: ConvFfnParams


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def init_dpe(init: Initializer, channels: int) -> DpeParams:
    return DpeParams(init.trunc_normal((channels, 3, 3)), init.zeros((channels,)))


def init_ssm(init: Initializer, channels: int, state_dim: int) -> SsmParams:
    rank = delta_rank(channels)
    a_log = np.log(np.arange(1, state_dim + 1, dtype=np.float64))
    return SsmParams(
        a_log=init.constant(np.tile(a_log, (channels, 1))),
        d=init.ones((channels,)),
        w_dt_in=init.trunc_normal((rank, channels)),
        b_dt_in=init.zeros((rank,)),
        w_dt_out=init.trunc_normal((channels, rank)),
        b_dt_out=init.zeros((channels,)),
        w_b=init.trunc_normal((state_dim, channels)),
        b_b=init.zeros((state_dim,)),
        w_c=init.trunc_normal((state_dim, channels)),
        b_c=init.zeros((state_dim,)),
    )


def init_window_attn(init: Initializer, channels: int, window: int, heads: int,
                     shifted: bool) -> WindowAttnParams:
    if channels % heads:
        raise ShapeError(f"window attention: channels {channels} not divisible by heads {heads}")
    table = (2 * window - 1) ** 2
    return WindowAttnParams(
        w_qkv=init.trunc_normal((3 * channels, channels)),
        b_qkv=init.zeros((3 * channels,)),
        w_out=init.trunc_normal((channels, channels)),
        b_out=init.zeros((channels,)),
        bias_table=init.zeros((table, heads)),
        window=window, heads=heads, shifted=shifted,
    )


def init_convffn(init: Initializer, channels: int, ratio: int) -> ConvFfnParams:
    hidden = channels * ratio
    return ConvFfnParams(
        w1=init.trunc_normal((hidden, channels)), b1=init.zeros((hidden,)),
        dw=init.trunc_normal((hidden, 3, 3)), db=init.zeros((hidden,)),
        w2=init.trunc_normal((channels, hidden)), b2=init.zeros((channels,)),
    )


def init_mixer(init: Initializer, kind: str, channels: int, state_dim: int,
               window: int, heads: int, layer_index: int):
    if kind == "ss2d":
        return [init_ssm(init, channels, state_dim) for _ in range(4)]
    if kind == "ssm":
        return [init_ssm(init, channels, state_dim)]
    if kind == "bissm":
        return [init_ssm(init, channels, state_dim) for _ in range(2)]
    if kind == "window_attn":
        return init_window_attn(init, channels, window, heads, shifted=layer_index % 2 == 1)
    raise ShapeError(f"unknown mixer kind {kind!r}")


def init_vss_block(init: Initializer, kind: str, channels: int, state_dim: int,
                   ffn_ratio: int, window: int, heads: int, layer_index: int) -> VssBlockParams:
    return VssBlockParams(
        mixer_kind=kind,
        mixer=init_mixer(init, kind, channels, state_dim, window, heads, layer_index),
        ln1_g=init.ones((channels,)), ln1_b=init.zeros((channels,)),
        ln2_g=init.ones((channels,)), ln2_b=init.zeros((channels,)),
        ffn=init_convffn(init, channels, ffn_ratio),
    )


# ---------------------------------------------------------------------------
# forward passes (params are bound structures of Tensors)
# ---------------------------------------------------------------------------

def ln2d(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    C, H, W = x.shape
    return reshape(layernorm_channels(reshape(x, (C, H * W)), gamma, beta), (C, H, W))


def dpe_forward(x: Tensor, p: DpeParams) -> Tensor:
    return add(x, dwconv3x3_pad1(x, p.w, p.b))


def convffn_forward(x: Tensor, p: ConvFfnParams) -> Tensor:
    C, H, W = x.shape
    hidden = p.w1.shape[0]
    h = pointwise_linear(reshape(x, (C, H * W)), p.w1, p.b1)
    h = dwconv3x3_pad1(reshape(h, (hidden, H, W)), p.dw, p.db)
    h = gelu(reshape(h, (hidden, H * W)))
    return reshape(pointwise_linear(h, p.w2, p.b2), (C, H, W))


def ssm_apply(seq: Tensor, p: SsmParams) -> Tensor:
    """Run one selective scan direction over a (C,T) sequence."""
    delta = softplus(pointwise_linear(pointwise_linear(seq, p.w_dt_in, p.b_dt_in),
                                      p.w_dt_out, p.b_dt_out))
    a = neg(exp(p.a_log))
    b = pointwise_linear(seq, p.w_b, p.b_b)
    c = pointwise_linear(seq, p.w_c, p.b_c)
    return selective_scan(seq, delta, a, b, c, p.d)


def ssm_forward(x: Tensor, params: list) -> Tensor:
    """Causal 1-d scan over row-major flattened tokens."""
    C, H, W = x.shape
    return reshape(ssm_apply(reshape(x, (C, H * W)), params[0]), (C, H, W))


def bissm_forward(x: Tensor, params: list) -> Tensor:
    """Forward plus reversed row-major scans, summed."""
    C, H, W = x.shape
    seq = reshape(x, (C, H * W))
    fwd = ssm_apply(seq, params[0])
    bwd = flip_last(ssm_apply(flip_last(seq), params[1]))
    return reshape(add(fwd, bwd), (C, H, W))


def ss2d_forward(x: Tensor, params: list) -> Tensor:
    """Four-direction 2-d selective scan.

    Directions: row-major forward, row-major reversed, column-major forward,
    column-major reversed. Each runs its own parameter set; results are
    un-permuted back to the map and summed in the fixed order (d0+d1)+(d2+d3).
    """
    C, H, W = x.shape
    seq_r = reshape(x, (C, H * W))
    seq_c = reshape(permute(x, (0, 2, 1)), (C, W * H))
    y0 = reshape(ssm_apply(seq_r, params[0]), (C, H, W))
    y1 = reshape(flip_last(ssm_apply(flip_last(seq_r), params[1])), (C, H, W))
    y2 = permute(reshape(ssm_apply(seq_c, params[2]), (C, W, H)), (0, 2, 1))
    y3 = permute(reshape(flip_last(ssm_apply(flip_last(seq_c), params[3])), (C, W, H)), (0, 2, 1))
    return add(add(y0, y1), add(y2, y3))


@lru_cache(maxsize=32)
def relative_index(window: int) -> np.ndarray:
    """Map (T,T) token pairs inside a window to bias-table rows."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel + window - 1
    return (rel[0] * (2 * window - 1) + rel[1]).astype(np.int64)


@lru_cache(maxsize=32)
def shift_mask(hp: int, wp: int, window: int, shift: int) -> np.ndarray:
    """Additive attention mask hiding cross-boundary pairs after a cyclic shift."""
    img = np.zeros((hp, wp))
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws_ in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img[hs, ws_] = cnt
            cnt += 1
    nh, nw = hp // window, wp // window
    wins = img.reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(-1, window * window)
    mask = np.where(wins[:, None, :] != wins[:, :, None], -1e4, 0.0)
    return mask  # (num_windows, T, T)


def window_attention_forward(x: Tensor, p: WindowAttnParams, shifted: bool | None = None) -> Tensor:
    """Multi-head attention inside non-overlapping windows, optionally shifted.

    The map is zero-padded to a window multiple, cyclically shifted by half a
    window when ``shifted``, partitioned, attended (with learned relative
    position bias and, for the shifted case, a cross-boundary mask), then
    reassembled and cropped back.
    """
    C, H, W = x.shape
    ws, heads = p.window, p.heads
    if C % heads:
        raise ShapeError(f"window attention: channels {C} not divisible by heads {heads}")
    dh = C // heads
    shifted = p.shifted if shifted is None else shifted
    hp = (H + ws - 1) // ws * ws
    wp = (W + ws - 1) // ws * ws
    h = pad_spatial(x, (0, hp - H), (0, wp - W)) if (hp != H or wp != W) else x
    shift = ws // 2 if (shifted and (hp > ws or wp > ws)) else 0
    if shift:
        h = roll2d(h, -shift, -shift)

    nh, nw = hp // ws, wp // ws
    B, T = nh * nw, ws * ws
    # (C,hp,wp) -> (B,T,C)
    tok = reshape(permute(reshape(h, (C, nh, ws, nw, ws)), (1, 3, 2, 4, 0)), (B * T, C))
    qkv = add(matmul(tok, permute(p.w_qkv, (1, 0))), p.b_qkv)
    qkv = permute(reshape(qkv, (B, T, 3, heads, dh)), (2, 0, 3, 1, 4))  # (3,B,heads,T,dh)
    q = reshape(slice_axis(qkv, 0, 0, 1), (B * heads, T, dh))
    k = reshape(slice_axis(qkv, 0, 1, 2), (B * heads, T, dh))
    v = reshape(slice_axis(qkv, 0, 2, 3), (B * heads, T, dh))

    attn = scale(bmm(q, permute(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    bias = gather_rows(p.bias_table, relative_index(ws).reshape(-1))   # (T*T, heads)
    bias = reshape(permute(bias, (1, 0)), (1, heads, T, T))
    attn = add(reshape(attn, (B, heads, T, T)), bias)
    if shift:
        mask = shift_mask(hp, wp, ws, shift).astype(x.dtype)
        attn = add(attn, Tensor(mask.reshape(B, 1, T, T)))
    attn = softmax_lastdim(reshape(attn, (B * heads, T, T)))

    out = reshape(permute(reshape(bmm(attn, v), (B, heads, T, dh)), (0, 2, 1, 3)), (B * T, C))
    out = add(matmul(out, permute(p.w_out, (1, 0))), p.b_out)
    # (B,T,C) -> (C,hp,wp)
    out = reshape(permute(reshape(out, (nh, nw, ws, ws, C)), (4, 0, 2, 1, 3)), (C, hp, wp))
    if shift:
        out = roll2d(out, shift, shift)
    if hp != H or wp != W:
        out = crop_spatial(out, H, W)
    return out


def mixer_forward(x: Tensor, kind: str, params) -> Tensor:
    if kind == "ss2d":
        return ss2d_forward(x, params)
    if kind == "ssm":
        return ssm_forward(x, params)
    if kind == "bissm":
        return bissm_forward(x, params)
    if kind == "window_attn":
        return window_attention_forward(x, params)
    raise ShapeError(f"unknown mixer kind {kind!r}")


def vss_block_forward(x: Tensor, p: VssBlockParams) -> Tensor:
    """Pre-norm residual token mixer followed by a pre-norm residual ConvFFN."""
    x1 = add(x, mixer_forward(ln2d(x, p.ln1_g, p.ln1_b), p.mixer_kind, p.mixer))
    return add(x1, convffn_forward(ln2d(x1, p.ln2_g, p.ln2_b), p.ffn))
