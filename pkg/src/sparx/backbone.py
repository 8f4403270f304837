"""Four-stage hierarchical backbone assembly.

Stem and stage transitions are strided 3x3 convolutions; each stage runs its
planned chain of normal layers (position encoding -> token-mixer block) and
ganglion layers (position encoding -> multi-layer aggregation -> fuse ->
token-mixer block). The first ganglion layer of stages 2..4 additionally
consumes a downsampled, re-projected copy of the previous stage's final
feature. A feature cache holds exactly the earlier outputs the schedule says
are still needed, evicting eagerly.

Also here: exact parameter counting, analytic MAC counting, the cache-driven
memory model, and a small synthetic training loop demonstrating end-to-end
differentiability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nd
from .nd import (Tape, Tensor, add, avgpool_stride, backward, conv2d, cross_entropy_logits,
                 gelu, mean_axis, pointwise_linear, reshape, scale)
from .blocks import (VssBlockParams, DpeParams, delta_rank, dpe_forward, init_dpe,
                     init_vss_block, ln2d, vss_block_forward)
from .config import ConfigError, ModelConfig
from .dmca import DmcaParams, dmca_forward, init_dmca
from .params import Initializer, bind, count_arrays, iter_arrays, pair_leaves
from .topology import (CROSS_STAGE_SLOT, CacheSchedule, ConnectionPlan, Role,
                       cache_schedule, plan_model)

# Spatial-reducer strides per stage, chosen so reduced token counts match the
# final stage's token count (stage 4 tokens = stage_i tokens / 4^(3-i)).
STAGE_REDUCE_STRIDE = (8, 4, 2, 1)


def reduce_stride_for_stage(stage_idx: int) -> int:
    return STAGE_REDUCE_STRIDE[stage_idx]


@dataclass
class StemParams:
    w1: np.ndarray
    b1: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


@dataclass
class DownsampleParams:
    w: np.ndarray
    b: np.ndarray
    ln_g: np.ndarray
    ln_b: np.ndarray


@dataclass
class BridgeParams:
    """Average-pool by 2 then pointwise projection to the new stage width."""
    w: np.ndarray
    b: np.ndarray


@dataclass
class LayerParams:
    dpe: DpeParams
    dmca: DmcaParams | None
    fuse_w: np.ndarray | None
    fuse_b: np.ndarray | None
    block: VssBlockParams


@dataclass
class StageParams:
    downsample: DownsampleParams | None
    bridge: BridgeParams | None
    layers: list[LayerParams] = field(default_factory=list)


@dataclass
class HeadParams:
    ln_g: np.ndarray
    ln_b: np.ndarray
    w: np.ndarray
    b: np.ndarray


@dataclass
class ModelParams:
    cfg: ModelConfig
    plans: list[ConnectionPlan]
    stem: StemParams
    stages: list[StageParams]
    head: HeadParams


def build(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Instantiate all parameters deterministically from one seed."""
    plans = plan_model(cfg)
    init = Initializer(seed, dtype=dtype)
    c1 = cfg.channels[0]
    if c1 % 2:
        raise ConfigError(f"first stage width {c1} must be even for the stem")
    stem = StemParams(
        w1=init.trunc_normal((c1 // 2, 3, 3, 3)), b1=init.zeros((c1 // 2,)),
        ln1_g=init.ones((c1 // 2,)), ln1_b=init.zeros((c1 // 2,)),
        w2=init.trunc_normal((c1, c1 // 2, 3, 3)), b2=init.zeros((c1,)),
        ln2_g=init.ones((c1,)), ln2_b=init.zeros((c1,)),
    )
    stages = []
    for i, plan in enumerate(plans):
        C = cfg.channels[i]
        down = None
        if i > 0:
            prev = cfg.channels[i - 1]
            down = DownsampleParams(
                w=init.trunc_normal((C, prev, 3, 3)), b=init.zeros((C,)),
                ln_g=init.ones((C,)), ln_b=init.zeros((C,)),
            )
        bridge = None
        if any(l.takes_cross_stage for l in plan.layers):
            prev = cfg.channels[i - 1]
            bridge = BridgeParams(w=init.trunc_normal((C, prev)), b=init.zeros((C,)))
        heads = max(1, C // cfg.head_dim)
        layers = []
        for layer_plan in plan.layers:
            dmca = None
            fuse_w = fuse_b = None
            if layer_plan.role is Role.GANGLION:
                dmca = init_dmca(init, C, layer_plan.y_count, reduce_stride_for_stage(i),
                                 groups=cfg.groups, mode=cfg.dmca_mode)
                fuse_w = init.trunc_normal((C, 2 * C))
                fuse_b = init.zeros((C,))
            block = init_vss_block(init, cfg.mixer, C, cfg.state_dim, cfg.ffn_ratio,
                                   cfg.window_size, heads, layer_plan.index - 1)
            layers.append(LayerParams(init_dpe(init, C), dmca, fuse_w, fuse_b, block))
        stages.append(StageParams(down, bridge, layers))
    c4 = cfg.channels[3]
    head = HeadParams(ln_g=init.ones((c4,)), ln_b=init.zeros((c4,)),
                      w=init.trunc_normal((cfg.num_classes, c4)), b=init.zeros((cfg.num_classes,)))
    return ModelParams(cfg, plans, stem, stages, head)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

class FeatureCache:
    """Stored layer outputs for one stage, validated against the schedule."""

    def __init__(self, schedule: CacheSchedule):
        self.schedule = schedule
        self.store: dict[int, Tensor] = {}
        self._last_need: dict[int, int] = {}
        for step in schedule.steps:
            for idx in step.live:
                self._last_need[idx] = max(self._last_need.get(idx, 0), step.step)

    def assert_live(self, step: int):
        expected = set(self.schedule.live_entering(step))
        got = set(self.store)
        if expected != got:
            raise AssertionError(
                f"feature cache out of sync at step {step}: have {sorted(got)}, expected {sorted(expected)}")

    def put(self, index: int, feature: Tensor):
        if index in self._last_need:
            self.store[index] = feature

    def get(self, index: int) -> Tensor:
        return self.store[index]

    def evict_after(self, step: int):
        for idx in self.schedule.steps[step - 1].evictions:
            del self.store[idx]


@dataclass
class CapturedFeature:
    stage: int       # 1-based
    layer: int       # 1-based within the stage
    role: str
    data: np.ndarray


def _stem_forward(p: StemParams, img: Tensor) -> Tensor:
    h = conv2d(img, p.w1, p.b1, stride=2, pad=1)
    h = gelu(ln2d(h, p.ln1_g, p.ln1_b))
    h = conv2d(h, p.w2, p.b2, stride=2, pad=1)
    return ln2d(h, p.ln2_g, p.ln2_b)


def _bridge_forward(p: BridgeParams, prev_final: Tensor) -> Tensor:
    pooled = avgpool_stride(prev_final, 2)
    c_prev, h, w = pooled.shape
    proj = pointwise_linear(reshape(pooled, (c_prev, h * w)), p.w, p.b)
    return reshape(proj, (p.w.shape[0], h, w))


def forward_bound(bound: ModelParams, image: Tensor, capture: bool = False,
                  to_stage: int | None = None):
    """Run a bound (Tensor-valued) model on one (3,H,W) image.

    Returns (logits Tensor, captured list). With ``to_stage`` in 1..4 the
    walk stops after that stage and returns its final feature instead of
    logits.
    """
    cfg = bound.cfg
    _, H, W = image.shape
    if H % 32 or W % 32:
        raise ConfigError(f"input size ({H},{W}) must be divisible by 32")
    captured: list[CapturedFeature] = []
    x = _stem_forward(bound.stem, image)
    prev_final = None
    for i, (stage, plan) in enumerate(zip(bound.stages, bound.plans)):
        if i > 0:
            x = conv2d(prev_final, stage.downsample.w, stage.downsample.b, stride=2, pad=1)
            x = ln2d(x, stage.downsample.ln_g, stage.downsample.ln_b)
        cache = FeatureCache(cache_schedule(plan))
        if stage.bridge is not None:
            cache.put(CROSS_STAGE_SLOT, _bridge_forward(stage.bridge, prev_final))
        C, h, w = x.shape
        for layer_plan, layer in zip(plan.layers, stage.layers):
            step = layer_plan.index
            cache.assert_live(step)
            t = dpe_forward(x, layer.dpe)
            if layer_plan.role is Role.GANGLION:
                ys = []
                if layer_plan.takes_cross_stage:
                    ys.append(reshape(cache.get(CROSS_STAGE_SLOT), (C, h * w)))
                ys.extend(reshape(cache.get(j), (C, h * w)) for j in layer_plan.sources)
                agg = dmca_forward(reshape(t, (C, h * w)), ys, layer.dmca, (h, w))
                t = reshape(pointwise_linear(agg, layer.fuse_w, layer.fuse_b), (C, h, w))
            x = vss_block_forward(t, layer.block)
            cache.put(step, x)
            cache.evict_after(step)
            if capture:
                captured.append(CapturedFeature(i + 1, step, layer_plan.role.value,
                                                np.array(x.data)))
        prev_final = x
        if to_stage is not None and i + 1 == to_stage:
            return x, captured
    c4 = prev_final.shape[0]
    pooled = mean_axis(reshape(prev_final, (c4, prev_final.shape[1] * prev_final.shape[2])),
                       axis=1, keepdims=True)
    normed = nd.layernorm_channels(pooled, bound.head.ln_g, bound.head.ln_b)
    logits = reshape(pointwise_linear(normed, bound.head.w, bound.head.b), (cfg.num_classes,))
    return logits, captured


def forward(model: ModelParams, image, capture: bool = False):
    """Inference on a raw-array model; returns (logits ndarray, captures)."""
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=_model_dtype(model)))
    logits, captured = forward_bound(bind(model), img, capture=capture)
    return np.array(logits.data), captured


def _model_dtype(model: ModelParams):
    return model.stem.w1.dtype


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def count_params(model: ModelParams) -> int:
    return count_arrays(model)


def named_param_sizes(model: ModelParams):
    return [(name, int(a.size)) for name, a in iter_arrays(model)]


def _mixer_macs(kind: str, C: int, N: int, state: int, window: int, heads: int) -> int:
    rank = delta_rank(C)
    scan_dir = 2 * N * C * rank + 2 * N * C * state + 9 * C * state * N + N * C
    if kind == "ss2d":
        return 4 * scan_dir
    if kind == "ssm":
        return scan_dir
    if kind == "bissm":
        return 2 * scan_dir
    if kind == "window_attn":
        T = window * window
        return 3 * N * C * C + 2 * N * T * C + N * C * C
    raise ConfigError(f"unknown mixer kind {kind!r}")


def count_flops(cfg: ModelConfig, input_size: int | None = None) -> dict:
    """Multiply-accumulate counts (1 MAC = 1 FLOP) with a component breakdown.

    Counts cover convolutions, linear projections, attention matmuls, and
    scans (9 MACs per channel-state-step); normalizations and pointwise
    nonlinearities are not counted.
    """
    size = int(input_size or cfg.input_size)
    if size % 32:
        raise ConfigError(f"input size {size} must be divisible by 32")
    plans = plan_model(cfg)
    fl = {"stem": 0, "downsample": 0, "bridge": 0, "dpe": 0, "mixer": 0, "ffn": 0,
          "aggregation": 0, "head": 0}
    fl["stem"] += (size // 2) ** 2 * (cfg.channels[0] // 2) * 3 * 9
    fl["stem"] += (size // 4) ** 2 * cfg.channels[0] * (cfg.channels[0] // 2) * 9
    for i, plan in enumerate(plans):
        C = cfg.channels[i]
        side = size // (4 * 2 ** i)
        N = side * side
        heads = max(1, C // cfg.head_dim)
        if i > 0:
            fl["downsample"] += N * C * cfg.channels[i - 1] * 9
        if any(l.takes_cross_stage for l in plan.layers):
            fl["bridge"] += N * C * cfg.channels[i - 1]
        s = reduce_stride_for_stage(i)
        r = s * s
        for layer in plan.layers:
            fl["dpe"] += N * C * 9
            fl["mixer"] += _mixer_macs(cfg.mixer, C, N, cfg.state_dim, cfg.window_size, heads)
            fl["ffn"] += N * C * (cfg.ffn_ratio * C) * 2 + N * (cfg.ffn_ratio * C) * 9
            if layer.role is Role.GANGLION:
                L = layer.y_count
                agg = N * (L * C) * 2 * C            # mixing projection
                agg += 2 * (N // r) * C * C + N * C * C   # q, k, v projections
                if s > 1:
                    agg += 2 * (N // r) * C * s * s  # strided depthwise reducers
                agg += (C * C // cfg.groups) * (N // r)   # channel attention logits
                agg += (C * C // cfg.groups) * N          # attention applied to value
                agg += N * 3 * C * 2 * C             # output projection
                agg += N * 2 * C * C                 # fuse back to C
                fl["aggregation"] += agg
    fl["head"] += cfg.channels[3] * cfg.num_classes
    fl["total"] = sum(v for k, v in fl.items() if k != "total")
    return fl


AGG_WORK_FEATURES = 6  # key/value/attended/output working buffers, in feature units


def memory_report(cfg: ModelConfig, input_size: int | None = None, mode: str | None = None,
                  bytes_per_value: int = 4) -> dict:
    """Cache-schedule-driven memory model.

    Per stage: the inference peak (live cached features plus the running
    activation, from the eviction schedule) and a training-footprint proxy
    (every layer output retained for the backward pass, plus each aggregation
    layer's concatenation input and working buffers). Totals across stages
    are reported for both.
    """
    size = int(input_size or cfg.input_size)
    if mode is not None and mode != cfg.topology_mode:
        raw = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}  # type: ignore[attr-defined]
        raw["topology_mode"] = mode
        cfg = ModelConfig(**raw)
    plans = plan_model(cfg)
    stages = []
    total_train = 0
    peak_inference = 0
    for i, plan in enumerate(plans):
        C = cfg.channels[i]
        side = size // (4 * 2 ** i)
        feat_bytes = C * side * side * bytes_per_value
        sched = cache_schedule(plan, feat_bytes)
        train_feats = plan.num_layers  # every output retained for backward
        if any(l.takes_cross_stage for l in plan.layers):
            train_feats += 1
        for layer in plan.layers:
            if layer.role is Role.GANGLION:
                train_feats += layer.y_count + AGG_WORK_FEATURES
        train_bytes = train_feats * feat_bytes
        stages.append({
            "stage": i + 1,
            "feature_bytes": feat_bytes,
            "peak_live_features": sched.peak_live_count,
            "peak_live_bytes": sched.peak_live_bytes,
            "training_bytes": train_bytes,
        })
        total_train += train_bytes
        peak_inference = max(peak_inference, sched.peak_live_bytes)
    return {
        "mode": cfg.topology_mode,
        "input_size": size,
        "stages": stages,
        "peak_inference_bytes": peak_inference,
        "total_training_bytes": total_train,
    }


# ---------------------------------------------------------------------------
# toy training
# ---------------------------------------------------------------------------

def make_toy_dataset(n: int = 64, size: int = 32, seed: int = 0):
    """Linearly separable two-class set: left-bright vs right-bright images."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(9000,))))
    images = 0.1 * rng.standard_normal((n, 3, size, size))
    labels = np.arange(n) % 2
    half = size // 2
    for i in range(n):
        if labels[i] == 0:
            images[i, :, :, :half] += 1.0
        else:
            images[i, :, :, half:] += 1.0
    return images, labels


@dataclass
class ToyTrainResult:
    losses: list[float]
    accuracy: float
    steps_run: int
    model: "ModelParams"


def evaluate(model: ModelParams, images, labels) -> float:
    correct = 0
    for img, lbl in zip(images, labels):
        logits, _ = forward(model, img)
        correct += int(np.argmax(logits) == int(lbl))
    return correct / len(labels)


def train_toy(cfg: ModelConfig, dataset=None, steps: int = 500, lr: float = 0.02,
              seed: int = 0, batch_size: int = 4, target_acc: float | None = None,
              eval_every: int = 25) -> ToyTrainResult:
    """Plain SGD on softmax cross-entropy over the synthetic set.

    Deterministic under ``seed`` (model init, data, and batch order all
    derive from it). Aborts with the failing step index if the loss goes
    non-finite. With ``target_acc`` set, training stops early once the full
    training set reaches that accuracy.
    """
    model = build(cfg, seed, dtype=np.float64)
    if dataset is None:
        dataset = make_toy_dataset(size=cfg.input_size, seed=seed)
    images, labels = dataset
    images = np.asarray(images, dtype=np.float64)
    order_rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=seed, spawn_key=(9001,))))
    losses: list[float] = []
    steps_run = 0
    for step in range(steps):
        idx = order_rng.choice(len(labels), size=min(batch_size, len(labels)), replace=False)
        tape = Tape()
        bound = bind(model, tape)
        loss = None
        for j in idx:
            logits, _ = forward_bound(bound, Tensor(images[j]))
            li = cross_entropy_logits(logits, int(labels[j]))
            loss = li if loss is None else add(loss, li)
        loss = scale(loss, 1.0 / len(idx))
        value = float(loss.data)
        if not np.isfinite(value):
            raise nd.NumericError(f"non-finite loss at step {step}")
        losses.append(value)
        grads = backward(tape, loss)
        for arr, leaf in pair_leaves(model, bound):
            arr -= lr * grads[leaf.node].data
        steps_run = step + 1
        if target_acc is not None and steps_run % eval_every == 0:
            if evaluate(model, images, labels) >= target_acc:
                break
    return ToyTrainResult(losses, evaluate(model, images, labels), steps_run, model)
