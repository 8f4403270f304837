"""Self-verification: independent oracles and a named-check registry.

The topology oracle re-derives stage plans by literally walking layer lists
per the placement and wiring rules, sharing no code with the planner. The
dense-attention oracle recomputes multi-head attention directly in numpy.
``run_checks`` executes every registered invariant and returns structured
results; a sabotage switch deliberately corrupts one computation so the
harness can prove it actually detects failures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nd
from .analysis import cka_linear, cost_model, erf_map
from .backbone import (build, count_flops, count_params, forward, memory_report)
from .blocks import (dpe_forward, init_convffn, init_ssm,
                     init_window_attn, init_vss_block, convffn_forward, ssm_apply,
                     ss2d_forward, bissm_forward, window_attention_forward,
                     vss_block_forward, SsmParams)
from .config import get_variant
from .dmca import cgca_attention, dmca_forward, dmca_param_count, group_channels, init_dmca
from .nd import Tensor, grad_check, sum_all
from .params import Initializer, bind, iter_arrays
from .topology import (ConnectionPlan, Mode, Role, StageTopologyConfig, cache_schedule,
                       plan_stage)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def oracle_stage_plan(num_layers, stride, window, mode, has_cross=False):
    """Literal layer-walking interpretation of the connectivity rules.

    Returns [(role, intra, inter, cross), ...] (1-based order). Placement
    walks the chain counting normal layers since the last hub; one hub is
    placed whenever stride-1 normals have accumulated, the final layer is
    forced to be a hub, and a first-layer hub with nothing to read is
    demoted. Sources are collected by scanning backwards layer by layer.
    """
    n = num_layers
    roles = ["normal"] * (n + 1)
    if mode != "plain":
        s = 1 if mode == "dsn" else stride
        pending = 0
        for i in range(1, n + 1):
            if pending == s - 1:
                roles[i] = "ganglion"
                pending = 0
            else:
                pending += 1
        roles[n] = "ganglion"
        if roles[1] == "ganglion" and not has_cross:
            roles[1] = "normal"
    out = []
    seen_first = False
    for i in range(1, n + 1):
        if roles[i] == "normal":
            out.append(("normal", (), (), False))
            continue
        if mode in ("dgc", "dsn"):
            intra = tuple(j for j in range(1, i) if roles[j] == "normal")
            inter = tuple(j for j in range(1, i) if roles[j] == "ganglion")
        else:
            intra = []
            j = i - 1
            while j >= 1 and roles[j] == "normal":
                intra.append(j)
                j -= 1
            intra = tuple(reversed(intra))
            inter = []
            j = i - 1
            while j >= 1 and len(inter) < window:
                if roles[j] == "ganglion":
                    inter.append(j)
                j -= 1
            inter = tuple(reversed(inter))
        cross = has_cross and not seen_first
        seen_first = True
        out.append(("ganglion", intra, inter, cross))
    return out


def plan_as_tuples(plan: ConnectionPlan):
    return [(l.role.value, l.intra_sources, l.inter_sources, l.takes_cross_stage)
            for l in plan.layers]


def dense_attention_oracle(tokens, w_qkv, b_qkv, w_out, b_out, heads):
    """Direct numpy multi-head self-attention over (T, C) tokens."""
    T, C = tokens.shape
    dh = C // heads
    qkv = tokens @ w_qkv.T + b_qkv
    q, k, v = qkv[:, :C], qkv[:, C:2 * C], qkv[:, 2 * C:]
    out = np.zeros((T, C))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        attn = e / e.sum(axis=-1, keepdims=True)
        out[:, sl] = attn @ v[:, sl]
    return out @ w_out.T + b_out


def dwconv_oracle(x, w, b=None, stride=1, pad=1):
    """Nested-loop depthwise convolution."""
    C, H, W = x.shape
    k = w.shape[1]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((C, Ho, Wo))
    for c in range(C):
        for i in range(Ho):
            for j in range(Wo):
                patch = xp[c, i * stride:i * stride + k, j * stride:j * stride + k]
                out[c, i, j] = (patch * w[c]).sum()
    if b is not None:
        out += b[:, None, None]
    return out


# ---------------------------------------------------------------------------
# check registry
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: str
    tolerance: str
    detail: str = ""


def _result(name, passed, measured, tolerance, detail=""):
    return CheckResult(name, bool(passed), str(measured), str(tolerance), detail)


def _sweep_configs():
    for mode in ("sparx", "dgc", "dsn"):
        for depth in range(1, 13):
            for stride in range(1, 5):
                for window in range(1, 5):
                    yield depth, stride, window, mode


def check_topology_oracle(faults):
    mismatches = 0
    total = 0
    for depth, stride, window, mode in _sweep_configs():
        for cross in (False, True):
            total += 1
            plan = plan_stage(StageTopologyConfig(depth, stride, window, Mode(mode),
                                                  has_cross_stage_input=cross))
            if plan_as_tuples(plan) != oracle_stage_plan(depth, stride, window, mode, cross):
                mismatches += 1
    return _result("topology_oracle_sweep", mismatches == 0, mismatches, "0 mismatches",
                   f"{total} configurations")


def check_worked_example(faults):
    plan = plan_stage(StageTopologyConfig(8, 2, 2))
    ok = plan.ganglion_indices == (2, 4, 6, 8) and plan.normal_indices == (1, 3, 5, 7)
    last = plan.layer(8)
    ok = ok and last.inter_sources == (4, 6) and last.intra_sources == (7,)
    return _result("topology_worked_example", ok,
                   f"ganglion={plan.ganglion_indices}", "{2,4,6,8} exact")


def check_window_locality(faults):
    bad = 0
    for depth, stride, window, mode in _sweep_configs():
        if mode != "sparx":
            continue
        plan = plan_stage(StageTopologyConfig(depth, stride, window, Mode.SPARX))
        for l in plan.layers:
            if l.role is not Role.GANGLION:
                continue
            nearest = [g for g in plan.ganglion_indices if g < l.index][-window:]
            if set(l.inter_sources) - set(nearest):
                bad += 1
    return _result("topology_window_locality", bad == 0, bad, "0 violations")


def check_window_monotonicity(faults):
    bad = 0
    for depth in range(2, 13):
        for stride in range(1, 5):
            for window in range(1, 4):
                a = plan_stage(StageTopologyConfig(depth, stride, window, Mode.SPARX))
                b = plan_stage(StageTopologyConfig(depth, stride, window + 1, Mode.SPARX))
                for la, lb in zip(a.layers, b.layers):
                    if not set(la.sources) <= set(lb.sources):
                        bad += 1
    return _result("topology_window_monotonic", bad == 0, bad, "0 removed edges")


def check_stride_monotonicity(faults):
    bad = 0
    for depth in range(1, 13):
        sets = {s: set(plan_stage(StageTopologyConfig(depth, s, 2, Mode.SPARX)).ganglion_indices)
                for s in range(1, 5)}
        for s_small in range(1, 5):
            for s_big in range(s_small, 5):
                if len(sets[s_small]) < len(sets[s_big]):
                    bad += 1
                if s_big % s_small == 0 and not sets[s_small] >= sets[s_big]:
                    bad += 1
    return _result("topology_stride_monotonic", bad == 0, bad,
                   "count monotone; superset for divisor strides")


def check_reachability(faults):
    bad = 0
    for depth, stride, window, mode in _sweep_configs():
        plan = plan_stage(StageTopologyConfig(depth, stride, window, Mode(mode)))
        adj = {i: set() for i in range(1, depth + 1)}
        for i in range(1, depth):
            adj[i].add(i + 1)
        for l in plan.layers:
            for src in l.sources:
                adj[src].add(l.index)
        frontier, seen, hops = {1}, {1}, 0
        while depth not in seen and frontier and hops <= depth:
            frontier = {j for i in frontier for j in adj[i]} - seen
            seen |= frontier
            hops += 1
        if depth not in seen or hops > depth:
            bad += 1
    return _result("topology_reachability", bad == 0, bad, "path within depth hops")


def check_cache_ordering(faults):
    bad = 0
    for depth in range(1, 13):
        for stride in range(1, 5):
            for window in range(1, 5):
                peaks = {m: cache_schedule(plan_stage(
                    StageTopologyConfig(depth, stride, window, Mode(m)))).peak_live_count
                    for m in ("sparx", "dgc", "dsn", "plain")}
                if not (peaks["plain"] <= peaks["sparx"] <= peaks["dgc"] <= peaks["dsn"]):
                    bad += 1
    plain_peak = cache_schedule(plan_stage(StageTopologyConfig(5, 2, 2, Mode.PLAIN))).peak_live_count
    bad += int(plain_peak != 1)
    return _result("cache_peak_ordering", bad == 0, bad, "plain<=sparx<=dgc<=dsn; plain==1")


def check_cost_model_agreement(faults):
    bad = 0
    for depth, stride, window, mode in _sweep_configs():
        sched = cache_schedule(plan_stage(StageTopologyConfig(depth, stride, window, Mode(mode))))
        cm = cost_model(depth, stride, window, mode)
        if cm["peak_features"] != sched.peak_live_count:
            bad += 1
    return _result("cost_model_schedule_agreement", bad == 0, bad, "exact")


def check_concat_split(faults):
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((64, 196)).astype(np.float32))
    b = Tensor(rng.standard_normal((64, 196)).astype(np.float32))
    cat = nd.concat([a, b], axis=0)
    ra, rb = nd.split(cat, 2, axis=0)
    ok = (cat.shape == (128, 196) and np.array_equal(ra.data, a.data)
          and np.array_equal(rb.data, b.data))
    return _result("concat_split_roundtrip", ok, "bit-equal" if ok else "mismatch", "bit-exact")


def check_softmax_rowsum(faults):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        x = Tensor(rng.uniform(-50, 50, size=(8, 16)))
        s = nd.softmax_lastdim(x).data
        if "softmax" in faults:
            s = s + 1e-3  # deliberately corrupted for harness self-test
        worst = max(worst, float(np.abs(s.sum(axis=-1) - 1).max()))
    return _result("softmax_rowsum", worst <= 1e-6, f"{worst:.2e}", "1e-6")


def check_softmax_shift(faults):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 9))
    d = np.abs(nd.softmax_lastdim(Tensor(x)).data
               - nd.softmax_lastdim(Tensor(x + 100.0)).data).max()
    return _result("softmax_shift_invariance", d <= 1e-6, f"{d:.2e}", "1e-6")


def check_layernorm_moments(faults):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((16, 10)) * 3 + 2
    y = nd.layernorm_channels(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    dm = float(np.abs(y.mean(axis=0)).max())
    dv = float(np.abs(y.var(axis=0) - 1).max())
    return _result("layernorm_moments", dm <= 1e-5 and dv <= 1e-5,
                   f"mean {dm:.2e}, var {dv:.2e}", "1e-5")


def check_dwconv_independence(faults):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 6, 6))
    x[2] = 0.0
    w = rng.standard_normal((4, 3, 3))
    y = nd.dwconv3x3_pad1(Tensor(x), Tensor(w)).data
    ok = np.all(y[2] == 0.0)
    return _result("dwconv_channel_independence", ok, "channel stays zero" if ok else "mixed",
                   "exact")


def check_scan_causality(faults):
    rng = np.random.default_rng(5)
    init = Initializer(5, dtype=np.float64)
    p = bind(init_ssm(init, 3, 2))
    x = rng.standard_normal((3, 6))
    y1 = ssm_apply(Tensor(x), p).data
    x2 = x.copy()
    x2[:, -1] += 10.0
    y2 = ssm_apply(Tensor(x2), p).data
    ok = np.array_equal(y1[:, :-1], y2[:, :-1])
    return _result("scan_causality", ok, "prefix bit-equal" if ok else "leaked", "bit-exact")


def check_scan_recurrence(faults):
    # constant delta=1, a=-1, b=1, c=1, d=0, x=[1,0,0] -> y = [1, e^-1, e^-2]
    x = np.array([[1.0, 0.0, 0.0]])
    delta = np.ones((1, 3))
    a = np.array([[-1.0]])
    b = np.ones((1, 3))
    c = np.ones((1, 3))
    d = np.zeros(1)
    y = nd.selective_scan(Tensor(x), Tensor(delta), Tensor(a), Tensor(b), Tensor(c), Tensor(d)).data
    ref = np.array([1.0, np.exp(-1.0), np.exp(-2.0)])
    err = float(np.abs(y[0] - ref).max())
    return _result("scan_hand_recurrence", err <= 1e-4, f"{err:.2e}", "1e-4")


def check_ss2d_equivariance(faults):
    rng = np.random.default_rng(6)
    init = Initializer(6, dtype=np.float64)
    ps = [bind(init_ssm(init, 2, 2)) for _ in range(4)]
    x = rng.standard_normal((2, 4, 4))
    y = ss2d_forward(Tensor(x), ps).data
    xr = x[:, ::-1, ::-1].copy()
    yr = ss2d_forward(Tensor(xr), [ps[1], ps[0], ps[3], ps[2]]).data
    err_rot = float(np.abs(yr[:, ::-1, ::-1] - y).max())
    xt = x.transpose(0, 2, 1).copy()
    yt = ss2d_forward(Tensor(xt), [ps[2], ps[3], ps[0], ps[1]]).data
    err_t = float(np.abs(yt.transpose(0, 2, 1) - y).max())
    err = max(err_rot, err_t)
    return _result("ss2d_symmetry_equivariance", err <= 1e-12, f"{err:.2e}", "1e-12",
                   "180-degree rotation and transpose with matching direction swaps")


def check_window_attn_oracle(faults):
    rng = np.random.default_rng(7)
    C, H = 8, 4
    init = Initializer(7, dtype=np.float64)
    p = init_window_attn(init, C, H, heads=2, shifted=False)
    p.w_qkv = rng.standard_normal(p.w_qkv.shape)
    p.b_qkv = rng.standard_normal(p.b_qkv.shape)
    p.w_out = rng.standard_normal(p.w_out.shape)
    p.b_out = rng.standard_normal(p.b_out.shape)
    x = rng.standard_normal((C, H, H))
    got = window_attention_forward(Tensor(x), bind(p)).data
    tokens = x.reshape(C, H * H).T
    ref = dense_attention_oracle(tokens, p.w_qkv, p.b_qkv, p.w_out, p.b_out, heads=2)
    err = float(np.abs(got.reshape(C, H * H).T - ref).max())
    return _result("window_attn_dense_oracle", err <= 1e-6, f"{err:.2e}", "1e-6")


def _grad_case(name, fn, arrays, tol=1e-4, max_elements=None):
    err = grad_check(fn, arrays, max_elements=max_elements,
                     rng=np.random.default_rng(99))
    return _result(name, err <= tol, f"{err:.2e}", f"{tol:g}")


def check_grad_dpe(faults):
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 4, 4))
    w = rng.standard_normal((2, 3, 3)) * 0.3
    b = rng.standard_normal(2) * 0.1
    from .blocks import DpeParams
    return _grad_case("grad_dpe",
                      lambda xx, ww, bb: sum_all(dpe_forward(xx, DpeParams(ww, bb))),
                      [x, w, b])


def check_grad_convffn(faults):
    rng = np.random.default_rng(9)
    init = Initializer(9, dtype=np.float64)
    p = init_convffn(init, 2, 2)
    x = rng.standard_normal((2, 3, 3))
    arrays = [x, p.w1, p.b1, p.dw, p.db, p.w2, p.b2]

    def fn(xx, w1, b1, dw, db, w2, b2):
        from .blocks import ConvFfnParams
        return sum_all(convffn_forward(xx, ConvFfnParams(w1, b1, dw, db, w2, b2)))

    return _grad_case("grad_convffn", fn, arrays)


def _ssm_arrays(p: SsmParams):
    return [p.a_log, p.d, p.w_dt_in, p.b_dt_in, p.w_dt_out, p.b_dt_out,
            p.w_b, p.b_b, p.w_c, p.b_c]


def _ssm_from_arrays(arrs):
    return SsmParams(*arrs)


def check_grad_scan(faults):
    rng = np.random.default_rng(10)
    init = Initializer(10, dtype=np.float64)
    p = init_ssm(init, 2, 2)
    x = rng.standard_normal((2, 5))

    def fn(xx, *arrs):
        return sum_all(ssm_apply(xx, _ssm_from_arrays(arrs)))

    return _grad_case("grad_selective_scan", fn, [x] + _ssm_arrays(p))


def check_grad_ss2d(faults):
    rng = np.random.default_rng(11)
    init = Initializer(11, dtype=np.float64)
    ps = [init_ssm(init, 2, 2) for _ in range(4)]
    x = rng.standard_normal((2, 4, 4))
    flat = [x] + [a for p in ps for a in _ssm_arrays(p)]

    def fn(xx, *arrs):
        groups = [_ssm_from_arrays(arrs[i * 10:(i + 1) * 10]) for i in range(4)]
        return sum_all(ss2d_forward(xx, groups))

    return _grad_case("grad_ss2d", fn, flat, max_elements=80)


def check_grad_bissm(faults):
    rng = np.random.default_rng(12)
    init = Initializer(12, dtype=np.float64)
    ps = [init_ssm(init, 2, 2) for _ in range(2)]
    x = rng.standard_normal((2, 3, 3))
    flat = [x] + [a for p in ps for a in _ssm_arrays(p)]

    def fn(xx, *arrs):
        groups = [_ssm_from_arrays(arrs[i * 10:(i + 1) * 10]) for i in range(2)]
        return sum_all(bissm_forward(xx, groups))

    return _grad_case("grad_bissm", fn, flat, max_elements=80)


def check_grad_window_attn(faults):
    rng = np.random.default_rng(13)
    init = Initializer(13, dtype=np.float64)
    p = init_window_attn(init, 4, 2, heads=2, shifted=True)
    x = rng.standard_normal((4, 4, 4))
    arrays = [x, p.w_qkv, p.b_qkv, p.w_out, p.b_out, p.bias_table]

    def fn(xx, wq, bq, wo, bo, table):
        from .blocks import WindowAttnParams
        q = WindowAttnParams(wq, bq, wo, bo, table, window=2, heads=2, shifted=True)
        return sum_all(window_attention_forward(xx, q))

    return _grad_case("grad_window_attn", fn, arrays, max_elements=80)


def check_grad_dmca(faults):
    rng = np.random.default_rng(14)
    init = Initializer(14, dtype=np.float64)
    p = init_dmca(init, 8, 2, reduce_stride=2, groups=4)
    x = rng.standard_normal((8, 16))
    ys = rng.standard_normal((2, 8, 16))
    arrays = [x, ys, p.mix_w, p.mix_b, p.q_w, p.q_b, p.k_w, p.k_b, p.v_w, p.v_b,
              p.out_w, p.out_b, p.q_red, p.k_red]

    def fn(xx, yy, mw, mb, qw, qb, kw, kb, vw, vb, ow, ob, qr, kr):
        from .dmca import DmcaParams
        q = DmcaParams(mode="full", channels=8, l_count=2, groups=4, reduce_stride=2,
                       mix_w=mw, mix_b=mb, q_w=qw, q_b=qb, k_w=kw, k_b=kb, v_w=vw, v_b=vb,
                       out_w=ow, out_b=ob, q_red=qr, k_red=kr)
        sources = nd.split(yy, 2, axis=0)
        ys_list = [nd.reshape(s, (8, 16)) for s in sources]
        return sum_all(dmca_forward(xx, ys_list, q, (4, 4)))

    return _grad_case("grad_dmca_full", fn, arrays, max_elements=120)


def check_grad_vss_block(faults):
    rng = np.random.default_rng(15)
    init = Initializer(15, dtype=np.float64)
    p = init_vss_block(init, "ss2d", 2, 2, 2, window=2, heads=1, layer_index=0)
    x = rng.standard_normal((2, 3, 3))
    flat = [x, p.ln1_g, p.ln1_b, p.ln2_g, p.ln2_b,
            p.ffn.w1, p.ffn.b1, p.ffn.dw, p.ffn.db, p.ffn.w2, p.ffn.b2]
    flat += [a for sp in p.mixer for a in _ssm_arrays(sp)]

    def fn(xx, l1g, l1b, l2g, l2b, w1, b1, dw, db, w2, b2, *marrs):
        from .blocks import ConvFfnParams, VssBlockParams
        mix = [_ssm_from_arrays(marrs[i * 10:(i + 1) * 10]) for i in range(4)]
        q = VssBlockParams("ss2d", mix, l1g, l1b, l2g, l2b,
                           ConvFfnParams(w1, b1, dw, db, w2, b2))
        return sum_all(vss_block_forward(xx, q))

    return _grad_case("grad_vss_block", fn, flat, max_elements=100)


def model_grad_check(cfg, seed=0, sample=60, h=1e-4, rng_seed=17):
    """Finite-difference check of a whole model's gradient on one image.

    Returns (max relative error, total parameter count). The analytic side
    comes from one taped forward/backward; the numeric side re-runs untaped
    forwards with individual parameter elements nudged by +-h.
    """
    from .backbone import forward_bound
    from .params import pair_leaves
    model = build(cfg, seed, dtype=np.float64)
    img = np.random.default_rng(16).standard_normal((3, cfg.input_size, cfg.input_size))

    tape = nd.Tape()
    bound = bind(model, tape)
    logits, _ = forward_bound(bound, Tensor(img))
    grads = nd.backward(tape, sum_all(logits))

    leaves = list(pair_leaves(model, bound))
    coords = [(i, j) for i, (arr, _) in enumerate(leaves) for j in range(arr.size)]
    total = len(coords)
    rng = np.random.default_rng(rng_seed)
    if sample is not None and sample < total:
        chosen = rng.choice(total, size=sample, replace=False)
        coords = [coords[int(k)] for k in sorted(chosen)]

    def eval_loss():
        lg, _ = forward_bound(bind(model), Tensor(img))
        return float(sum_all(lg).data)

    worst = 0.0
    for i, j in coords:
        arr, leaf = leaves[i]
        orig = arr.flat[j]
        arr.flat[j] = orig + h
        fp = eval_loss()
        arr.flat[j] = orig - h
        fm = eval_loss()
        arr.flat[j] = orig
        numeric = (fp - fm) / (2 * h)
        ana = grads[leaf.node].data.flat[j]
        worst = max(worst, abs(ana - numeric) / max(1.0, abs(ana), abs(numeric)))
    return worst, total


def check_grad_reduced_model(faults):
    worst, total = model_grad_check(get_variant("tiny-reduced"), sample=60)
    return _result("grad_reduced_model", worst <= 1e-3, f"{worst:.2e}", "1e-3",
                   f"sampled 60 of {total} parameters")


def check_dmca_shape_independence(faults):
    shapes = set()
    for side in (7, 14, 28, 56):
        n = side * side
        stride = side // 7
        init = Initializer(20, dtype=np.float64)
        p = init_dmca(init, 8, 2, reduce_stride=stride, groups=4,
                      mode="full" if stride > 1 else "no_sr")
        rng = np.random.default_rng(21)
        q = group_channels(Tensor(rng.standard_normal((8, n // (stride * stride)))), 4)
        k = group_channels(Tensor(rng.standard_normal((8, n // (stride * stride)))), 4)
        attn = cgca_attention(q, k, scale_n=n // (stride * stride))
        shapes.add(attn.shape)
    ok = shapes == {(4, 2, 2)}
    return _result("dmca_attention_shape_independence", ok, str(sorted(shapes)),
                   "G x C/G x C/G for all N")


def check_dmca_rowsum(faults):
    rng = np.random.default_rng(22)
    worst = 0.0
    for _ in range(100):
        q = group_channels(Tensor(rng.standard_normal((8, 16))), 4)
        k = group_channels(Tensor(rng.standard_normal((8, 16))), 4)
        attn = cgca_attention(q, k, scale_n=16).data
        worst = max(worst, float(np.abs(attn.sum(axis=-1) - 1).max()))
    return _result("dmca_attention_rowsum", worst <= 1e-6, f"{worst:.2e}", "1e-6")


def check_dmca_zero_sources(faults):
    init = Initializer(23, dtype=np.float64)
    p = init_dmca(init, 8, 2, reduce_stride=1, groups=4)
    rng = np.random.default_rng(24)
    x = rng.standard_normal((8, 16))
    zeros = [Tensor(np.zeros((8, 16))) for _ in range(2)]
    out1 = dmca_forward(Tensor(x), zeros, p, (4, 4)).data
    out2 = dmca_forward(Tensor(2 * x), zeros, p, (4, 4)).data
    err = float(np.abs(out2 - 2 * out1).max())  # linear in x when sources are zero
    return _result("dmca_zero_sources_linear", err <= 1e-9, f"{err:.2e}", "1e-9")


def check_dmca_param_formula(faults):
    bad = 0
    for mode in ("full", "concat", "no_cgca", "no_sr", "no_skip"):
        for C, L, s in ((8, 1, 1), (8, 3, 2), (16, 2, 4)):
            init = Initializer(25, dtype=np.float64)
            p = init_dmca(init, C, L, reduce_stride=s, mode=mode)
            actual = sum(a.size for _, a in iter_arrays(p))
            if actual != dmca_param_count(C, L, s, mode=mode):
                bad += 1
    return _result("dmca_param_count_formula", bad == 0, bad, "exact for all modes")


def check_accounting_bands(faults):
    rows = []
    ok = True
    for name, p_t, f_t in (("tiny", 27.1e6, 5.2e9), ("small", 47e6, 9.3e9), ("base", 84e6, 15.9e9)):
        cfg = get_variant(name)
        p = count_params(build(cfg, 0))
        f = count_flops(cfg)["total"]
        ok = ok and abs(p - p_t) / p_t <= 0.10 and abs(f - f_t) / f_t <= 0.15
        rows.append(f"{name} {p/1e6:.1f}M/{f/1e9:.2f}G")
    return _result("params_flops_bands", ok, "; ".join(rows), "params +-10%, flops +-15%")


def check_flops_resolution(faults):
    cfg = get_variant("tiny")
    ratio = count_flops(cfg, 384)["total"] / count_flops(cfg, 224)["total"]
    return _result("flops_resolution_ratio", 2.9 <= ratio <= 3.1, f"{ratio:.4f}", "[2.9, 3.1]")


def check_build_determinism(faults):
    cfg = get_variant("tiny-reduced")
    a = build(cfg, 0)
    b = build(cfg, 0)
    same = all(np.array_equal(x, y) for (_, x), (_, y) in
               zip(iter_arrays(a), iter_arrays(b)))
    return _result("build_determinism", same, "bit-identical" if same else "differs", "bit-exact")


def check_forward_determinism(faults):
    cfg = get_variant("tiny-reduced")
    model = build(cfg, 0)
    img = np.random.default_rng(30).standard_normal((3, 32, 32)).astype(np.float32)
    l1, _ = forward(model, img)
    l2, _ = forward(model, img)
    same = np.array_equal(l1, l2)
    return _result("forward_determinism", same, "bit-identical" if same else "differs", "bit-exact")


def check_memory_ordering(faults):
    cfg = get_variant("tiny")
    vals = {m: memory_report(cfg, mode=m)["total_training_bytes"]
            for m in ("plain", "sparx", "dgc", "dsn")}
    ok = vals["plain"] < vals["sparx"] < vals["dgc"] < vals["dsn"]
    return _result("memory_mode_ordering", ok,
                   " < ".join(f"{m}:{vals[m]//2**20}MiB" for m in ("plain", "sparx", "dgc", "dsn")),
                   "plain < sparx < dgc < dsn")


def check_mixer_interchangeability(faults):
    plans = {}
    dmca_shapes = {}
    for mixer in ("ss2d", "ssm", "bissm", "window_attn"):
        cfg = get_variant("tiny-reduced", mixer=mixer)
        model = build(cfg, 0)
        plans[mixer] = [plan_as_tuples(p) for p in model.plans]
        dmca_shapes[mixer] = [
            tuple(a.shape for _, a in iter_arrays(l.dmca))
            for st in model.stages for l in st.layers if l.dmca is not None
        ]
    ok = (len({str(v) for v in plans.values()}) == 1
          and len({str(v) for v in dmca_shapes.values()}) == 1)
    return _result("mixer_interchangeability", ok,
                   "plans and aggregator shapes identical" if ok else "diverged", "exact")


def check_cka_identities(faults):
    rng = np.random.default_rng(40)
    a = rng.standard_normal((32, 12))
    self_err = abs(cka_linear(a, a) - 1.0)
    qm, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    orth_err = abs(cka_linear(a, 3.0 * (a @ qm)) - 1.0)
    b = rng.standard_normal((32, 12))
    sym_err = abs(cka_linear(a, b) - cka_linear(b, a))
    worst = max(self_err, orth_err, sym_err)
    return _result("cka_identities", worst <= 1e-6, f"{worst:.2e}", "1e-6")


def check_erf_footprints(faults):
    rng = np.random.default_rng(41)
    w1 = Tensor(rng.standard_normal((1, 3, 3)))
    w2 = Tensor(rng.standard_normal((1, 3, 3)))
    images = [rng.standard_normal((1, 9, 9)) for _ in range(2)]
    one = erf_map(lambda img: nd.dwconv3x3_pad1(img, w1), images)
    two = erf_map(lambda img: nd.dwconv3x3_pad1(nd.dwconv3x3_pad1(img, w1), w2), images)
    s1 = one.support()
    s2 = two.support()
    ok = s1.sum() == 9 and s2.sum() == 25 and np.all(s2[s1])
    return _result("erf_conv_footprints", ok, f"3x3 support={int(s1.sum())}, stacked={int(s2.sum())}",
                   "9 and 25 cells")


CHECKS = [
    check_topology_oracle,
    check_worked_example,
    check_window_locality,
    check_window_monotonicity,
    check_stride_monotonicity,
    check_reachability,
    check_cache_ordering,
    check_cost_model_agreement,
    check_concat_split,
    check_softmax_rowsum,
    check_softmax_shift,
    check_layernorm_moments,
    check_dwconv_independence,
    check_scan_causality,
    check_scan_recurrence,
    check_ss2d_equivariance,
    check_window_attn_oracle,
    check_grad_dpe,
    check_grad_convffn,
    check_grad_scan,
    check_grad_ss2d,
    check_grad_bissm,
    check_grad_window_attn,
    check_grad_dmca,
    check_grad_vss_block,
    check_grad_reduced_model,
    check_dmca_shape_independence,
    check_dmca_rowsum,
    check_dmca_zero_sources,
    check_dmca_param_formula,
    check_accounting_bands,
    check_flops_resolution,
    check_build_determinism,
    check_forward_determinism,
    check_memory_ordering,
    check_mixer_interchangeability,
    check_cka_identities,
    check_erf_footprints,
]

SABOTAGE_TARGETS = ("softmax",)


def run_checks(sabotage=frozenset()) -> list[CheckResult]:
    """Run every registered check; failures never abort the suite early."""
    faults = frozenset(sabotage)
    results = []
    for fn in CHECKS:
        try:
            results.append(fn(faults))
        except Exception as e:  # a crashed check is a failed check
            results.append(_result(fn.__name__.removeprefix("check_"), False,
                                   f"exception: {type(e).__name__}: {e}", "no exception"))
    return results
