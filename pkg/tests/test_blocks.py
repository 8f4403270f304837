"""Layer blocks: position encoding, scan mixers, window attention, VSS block."""

import numpy as np
import pytest

from sparx import nd
from sparx.blocks import (DpeParams, SsmParams, bissm_forward, convffn_forward,
                          dpe_forward, init_convffn, init_ssm, init_vss_block,
                          init_window_attn, shift_mask, ss2d_forward, ssm_apply,
                          vss_block_forward, window_attention_forward)
from sparx.nd import ShapeError, Tensor
from sparx.params import Initializer, bind, iter_arrays
from sparx.verify import dense_attention_oracle, dwconv_oracle


def scan_reference(x, p):
    """Plain-loop scan over (C,T) with numpy SsmParams; independent path."""
    mid = p.w_dt_in @ x + p.b_dt_in[:, None]
    delta = np.logaddexp(0, p.w_dt_out @ mid + p.b_dt_out[:, None])
    A = -np.exp(p.a_log)
    B = p.w_b @ x + p.b_b[:, None]
    Cm = p.w_c @ x + p.b_c[:, None]
    C, T = x.shape
    S = A.shape[1]
    h = np.zeros((C, S))
    y = np.zeros((C, T))
    for t in range(T):
        h = np.exp(delta[:, t, None] * A) * h + (delta[:, t] * x[:, t])[:, None] * B[None, :, t]
        y[:, t] = h @ Cm[:, t] + p.d * x[:, t]
    return y


def ss2d_reference(x, ps):
    """Explicit permute-scan-unpermute oracle for the four directions."""
    C, H, W = x.shape
    flat = x.reshape(C, H * W)
    idx_row = np.arange(H * W)
    idx_col = np.arange(H * W).reshape(H, W).T.reshape(-1)
    out = np.zeros((C, H * W))
    for p, idx in zip(ps, [idx_row, idx_row[::-1], idx_col, idx_col[::-1]]):
        y = scan_reference(flat[:, idx], p)
        un = np.zeros_like(y)
        un[:, idx] = y
        out += un
    return out.reshape(C, H, W)


def zeroed(p: SsmParams) -> SsmParams:
    """Copy with the state-input projection zeroed, so B is identically 0."""
    return SsmParams(
        a_log=p.a_log.copy(), d=p.d.copy(),
        w_dt_in=p.w_dt_in.copy(), b_dt_in=p.b_dt_in.copy(),
        w_dt_out=p.w_dt_out.copy(), b_dt_out=p.b_dt_out.copy(),
        w_b=np.zeros_like(p.w_b), b_b=np.zeros_like(p.b_b),
        w_c=p.w_c.copy(), b_c=p.b_c.copy(),
    )


class TestDpe:
    def test_zero_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 4, 4))
        p = bind(DpeParams(np.zeros((2, 3, 3)), np.zeros(2)))
        out = dpe_forward(Tensor(x), p)
        assert np.array_equal(out.data, x)

    def test_delta_kernel_doubles_input(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 5, 5))
        w = np.zeros((3, 3, 3))
        w[:, 1, 1] = 1.0
        out = dpe_forward(Tensor(x), bind(DpeParams(w, np.zeros(3))))
        assert np.allclose(out.data, 2 * x, atol=1e-12)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 3))
        w = rng.standard_normal((2, 3, 3))
        b = rng.standard_normal(2)
        out = dpe_forward(Tensor(x), bind(DpeParams(w, b)))
        assert np.allclose(out.data, x + dwconv_oracle(x, w, b), atol=1e-12)


class TestSelectiveScan:
    def test_zero_input_matrix_gives_passthrough(self):
        init = Initializer(3, dtype=np.float64)
        p = zeroed(init_ssm(init, 3, 4))
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 6))
        out = ssm_apply(Tensor(x), bind(p))
        assert np.allclose(out.data, p.d[:, None] * x, atol=1e-12)

    def test_hand_unrolled_recurrence(self):
        x = np.array([[1.0, 0.0, 0.0]])
        y = nd.selective_scan(Tensor(x), Tensor(np.ones((1, 3))), Tensor([[-1.0]]),
                              Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))),
                              Tensor(np.zeros(1))).data
        assert np.allclose(y[0], [1.0, np.exp(-1), np.exp(-2)], atol=1e-4)

    def test_matches_reference_loop(self):
        init = Initializer(4, dtype=np.float64)
        p = init_ssm(init, 3, 2)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 7))
        got = ssm_apply(Tensor(x), bind(p)).data
        assert np.allclose(got, scan_reference(x, p), atol=1e-12)

    def test_causal_at_every_position(self):
        init = Initializer(5, dtype=np.float64)
        p = bind(init_ssm(init, 2, 2))
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 5))
        base = ssm_apply(Tensor(x), p).data
        for t in range(5):
            x2 = x.copy()
            x2[:, t] += 3.0
            y2 = ssm_apply(Tensor(x2), p).data
            assert np.array_equal(base[:, :t], y2[:, :t])


class TestSs2d:
    def test_single_token_is_sum_of_four_scans(self):
        init = Initializer(6, dtype=np.float64)
        ps = [init_ssm(init, 3, 2) for _ in range(4)]
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 1, 1))
        out = ss2d_forward(Tensor(x), bind(ps)).data
        expect = sum(scan_reference(x.reshape(3, 1), p) for p in ps).reshape(3, 1, 1)
        assert np.allclose(out, expect, atol=1e-12)

    def test_zero_input_matrix_gives_four_passthroughs(self):
        init = Initializer(7, dtype=np.float64)
        base = init_ssm(init, 2, 2)
        ps = [zeroed(base)] * 4
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 3))
        out = ss2d_forward(Tensor(x), bind(ps)).data
        assert np.allclose(out, 4 * base.d[:, None, None] * x, atol=1e-12)

    def test_corner_influence_matches_permutation_oracle(self):
        init = Initializer(8, dtype=np.float64)
        ps = [init_ssm(init, 1, 2) for _ in range(4)]
        x = np.zeros((1, 2, 2))
        x[0, 0, 0] = 1.0
        got = ss2d_forward(Tensor(x), bind(ps)).data
        assert np.allclose(got, ss2d_reference(x, ps), atol=1e-12)

    def test_random_maps_match_permutation_oracle(self):
        init = Initializer(9, dtype=np.float64)
        ps = [init_ssm(init, 2, 2) for _ in range(4)]
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 4, 3))
        got = ss2d_forward(Tensor(x), bind(ps)).data
        assert np.allclose(got, ss2d_reference(x, ps), atol=1e-12)

    def test_symmetry_equivariance_exact(self):
        # 180-degree rotation swaps the forward/reversed orders; transpose
        # swaps row/column orders. Both hold exactly in float64.
        init = Initializer(10, dtype=np.float64)
        ps = [bind(init_ssm(init, 2, 2)) for _ in range(4)]
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 4, 4))
        y = ss2d_forward(Tensor(x), ps).data
        rot = ss2d_forward(Tensor(x[:, ::-1, ::-1].copy()), [ps[1], ps[0], ps[3], ps[2]]).data
        assert np.abs(rot[:, ::-1, ::-1] - y).max() <= 1e-12
        tr = ss2d_forward(Tensor(x.transpose(0, 2, 1).copy()), [ps[2], ps[3], ps[0], ps[1]]).data
        assert np.abs(tr.transpose(0, 2, 1) - y).max() <= 1e-12


class TestBissm:
    def test_single_token_doubles_single_scan(self):
        init = Initializer(11, dtype=np.float64)
        p = init_ssm(init, 3, 2)
        rng = np.random.default_rng(11)
        x = rng.standard_normal((3, 1, 1))
        out = bissm_forward(Tensor(x), bind([p, p])).data
        assert np.allclose(out, 2 * scan_reference(x.reshape(3, 1), p).reshape(3, 1, 1),
                           atol=1e-12)

    def test_zero_input_matrix(self):
        init = Initializer(12, dtype=np.float64)
        base = init_ssm(init, 2, 2)
        rng = np.random.default_rng(12)
        x = rng.standard_normal((2, 2, 2))
        out = bissm_forward(Tensor(x), bind([zeroed(base), zeroed(base)])).data
        assert np.allclose(out, 2 * base.d[:, None, None] * x, atol=1e-12)

    def test_backward_branch_carries_anticausal_influence(self):
        init = Initializer(13, dtype=np.float64)
        fwd = init_ssm(init, 1, 2)
        bwd = init_ssm(init, 1, 2)
        dead_fwd = zeroed(fwd)
        dead_fwd.d = np.zeros_like(dead_fwd.d)
        dead_fwd.w_c = np.zeros_like(dead_fwd.w_c)
        rng = np.random.default_rng(13)
        x = rng.standard_normal((1, 1, 4))
        base = bissm_forward(Tensor(x), bind([dead_fwd, bwd])).data
        x2 = x.copy()
        x2[0, 0, -1] += 1.0
        bumped = bissm_forward(Tensor(x2), bind([dead_fwd, bwd])).data
        assert abs(bumped[0, 0, 0] - base[0, 0, 0]) > 1e-8
        # with the backward branch dead instead, the first token cannot move
        dead_bwd = zeroed(bwd)
        dead_bwd.d = np.zeros_like(dead_bwd.d)
        dead_bwd.w_c = np.zeros_like(dead_bwd.w_c)
        base = bissm_forward(Tensor(x), bind([fwd, dead_bwd])).data
        bumped = bissm_forward(Tensor(x2), bind([fwd, dead_bwd])).data
        assert bumped[0, 0, 0] == base[0, 0, 0]


class TestWindowAttention:
    def test_single_window_equals_dense_attention(self):
        rng = np.random.default_rng(14)
        C, H = 8, 4
        init = Initializer(14, dtype=np.float64)
        p = init_window_attn(init, C, H, heads=2, shifted=False)
        for name in ("w_qkv", "b_qkv", "w_out", "b_out"):
            setattr(p, name, rng.standard_normal(getattr(p, name).shape))
        x = rng.standard_normal((C, H, H))
        got = window_attention_forward(Tensor(x), bind(p)).data
        ref = dense_attention_oracle(x.reshape(C, H * H).T, p.w_qkv, p.b_qkv,
                                     p.w_out, p.b_out, heads=2)
        assert np.allclose(got.reshape(C, H * H).T, ref, atol=1e-6)

    def test_partition_arithmetic_14x14_window7(self):
        assert shift_mask(14, 14, 7, 3).shape == (4, 49, 49)

    def test_windows_do_not_leak_unshifted(self):
        init = Initializer(15, dtype=np.float64)
        p = bind(init_window_attn(init, 4, 2, heads=2, shifted=False))
        rng = np.random.default_rng(15)
        x = rng.standard_normal((4, 4, 4))
        base = window_attention_forward(Tensor(x), p).data
        x2 = x.copy()
        x2[:, :2, :2] += 5.0  # perturb only the top-left window
        bumped = window_attention_forward(Tensor(x2), p).data
        assert np.array_equal(base[:, 2:, 2:], bumped[:, 2:, 2:])
        assert not np.allclose(base[:, :2, :2], bumped[:, :2, :2])

    def test_uniform_input_closed_form(self):
        rng = np.random.default_rng(16)
        C, ws = 6, 3
        init = Initializer(16, dtype=np.float64)
        p = init_window_attn(init, C, ws, heads=3, shifted=False)
        p.w_qkv = rng.standard_normal(p.w_qkv.shape)
        p.b_qkv = rng.standard_normal(p.b_qkv.shape)
        p.w_out = rng.standard_normal(p.w_out.shape)
        p.b_out = rng.standard_normal(p.b_out.shape)
        token = rng.standard_normal(C)
        x = np.tile(token[:, None, None], (1, 6, 6))
        out = window_attention_forward(Tensor(x), bind(p)).data
        qkv = p.w_qkv @ token + p.b_qkv
        expect = p.w_out @ qkv[2 * C:] + p.b_out
        assert np.allclose(out, expect[:, None, None], atol=1e-9)

    def test_channels_not_divisible_by_heads_rejected(self):
        init = Initializer(17, dtype=np.float64)
        with pytest.raises(ShapeError, match="heads"):
            init_window_attn(init, 6, 2, heads=4, shifted=False)

    def test_shifted_variant_pads_and_crops_odd_sizes(self):
        init = Initializer(18, dtype=np.float64)
        p = bind(init_window_attn(init, 4, 4, heads=2, shifted=True))
        rng = np.random.default_rng(18)
        x = rng.standard_normal((4, 6, 10))
        out = window_attention_forward(Tensor(x), p)
        assert out.shape == (4, 6, 10)


class TestVssBlock:
    def test_zero_weights_pure_residual(self):
        init = Initializer(19, dtype=np.float64)
        p = init_vss_block(init, "ss2d", 2, 2, 2, window=2, heads=1, layer_index=0)
        for sp in p.mixer:
            for _, arr in iter_arrays(sp):
                arr[...] = 0.0
        for _, arr in iter_arrays(p.ffn):
            arr[...] = 0.0
        rng = np.random.default_rng(19)
        x = rng.standard_normal((2, 4, 4))
        out = vss_block_forward(Tensor(x), bind(p))
        assert np.allclose(out.data, x, atol=1e-12)

    @pytest.mark.parametrize("kind", ["ss2d", "ssm", "bissm", "window_attn"])
    def test_all_mixers_preserve_shape(self, kind):
        init = Initializer(20, dtype=np.float64)
        p = init_vss_block(init, kind, 4, 2, 2, window=2, heads=2, layer_index=0)
        rng = np.random.default_rng(20)
        x = rng.standard_normal((4, 6, 6))
        out = vss_block_forward(Tensor(x), bind(p))
        assert out.shape == (4, 6, 6)

    def test_mixer_swap_changes_values_not_shape(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((4, 4, 4))
        outs = {}
        for kind in ("ss2d", "ssm", "bissm", "window_attn"):
            init = Initializer(21, dtype=np.float64)
            p = init_vss_block(init, kind, 4, 2, 2, window=2, heads=2, layer_index=0)
            outs[kind] = vss_block_forward(Tensor(x), bind(p)).data
        shapes = {k: v.shape for k, v in outs.items()}
        assert set(shapes.values()) == {(4, 4, 4)}
        assert not np.allclose(outs["ss2d"], outs["window_attn"])

    def test_convffn_expansion_shapes(self):
        init = Initializer(22, dtype=np.float64)
        p = init_convffn(init, 6, 4)
        assert p.w1.shape == (24, 6) and p.w2.shape == (6, 24) and p.dw.shape == (24, 3, 3)
        rng = np.random.default_rng(22)
        out = convffn_forward(Tensor(rng.standard_normal((6, 3, 3))), bind(p))
        assert out.shape == (6, 3, 3)


class TestBlockGradients:
    """Every block matches central finite differences in float64."""

    @pytest.mark.parametrize("check_name", [
        "check_grad_dpe", "check_grad_convffn", "check_grad_scan", "check_grad_ss2d",
        "check_grad_bissm", "check_grad_window_attn", "check_grad_vss_block",
    ])
    def test_gradients(self, check_name):
        from sparx import verify
        result = getattr(verify, check_name)(frozenset())
        assert result.passed, f"{result.name}: {result.measured} vs {result.tolerance}"
