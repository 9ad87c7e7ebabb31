import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coherdiff import numcore as nc
from coherdiff.attn import (Attention, ConvExpand, FusionGate, RegionMask, SFEBlock, SimilarityMaps,
                            attention_weights, expand_similarity, heat_map, rectified_attention, sca_attend,
                            scaled_attention, self_similarity_map, sfe_fuse)
from coherdiff.errors import DimensionError, ParameterError, RectificationError
from coherdiff.oracle import attn_oracle, expand_oracle, sca_oracle, ss_oracle


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def t64(a):
    return nc.Tensor(np.asarray(a, dtype=np.float64))


class TestScaledAttention:
    def test_single_key_returns_its_value(self, rng):
        q, k, v = rng.standard_normal((5, 4)), rng.standard_normal((1, 4)), rng.standard_normal((1, 3))
        out = scaled_attention(t64(q), t64(k), t64(v)).data
        np.testing.assert_allclose(out, np.repeat(v, 5, axis=0), atol=1e-15)

    def test_identical_keys_average_values(self, rng):
        q, v = rng.standard_normal((3, 4)), rng.standard_normal((6, 2))
        k = np.tile(rng.standard_normal((1, 4)), (6, 1))
        out = scaled_attention(t64(q), t64(k), t64(v)).data
        np.testing.assert_allclose(out, np.tile(v.mean(0), (3, 1)), atol=1e-14)

    def test_random_case_matches_oracle(self, rng):
        q, k, v = rng.standard_normal((4, 8)), rng.standard_normal((6, 8)), rng.standard_normal((6, 8))
        np.testing.assert_allclose(scaled_attention(t64(q), t64(k), t64(v)).data, attn_oracle(q, k, v)[0],
                                   atol=1e-10, rtol=0)

    def test_output_projection_applied(self, rng):
        with nc.precision(np.float64):
            proj = nc.Linear(3, 5, rng)
        q, k, v = rng.standard_normal((4, 2)), rng.standard_normal((6, 2)), rng.standard_normal((6, 3))
        ref = attn_oracle(q, k, v)[0] @ proj.weight.data + proj.bias.data
        np.testing.assert_allclose(scaled_attention(t64(q), t64(k), t64(v), proj).data, ref, atol=1e-12)

    def test_empty_context(self):
        with pytest.raises(ParameterError):
            scaled_attention(t64(np.ones((2, 3))), t64(np.ones((0, 3))), t64(np.ones((0, 3))))


class TestRectifiedAttention:
    def test_all_true_mask_is_plain_attention(self, rng):
        q, k, v = rng.standard_normal((5, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 2))
        mask = np.ones((5, 3), dtype=bool)
        np.testing.assert_allclose(rectified_attention(t64(q), t64(k), t64(v), mask).data,
                                   scaled_attention(t64(q), t64(k), t64(v)).data, atol=1e-12)

    def test_single_allowed_token_copies_its_value(self, rng):
        q, k, v = rng.standard_normal((4, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 2))
        mask = np.zeros((4, 3), dtype=bool)
        mask[:, 1] = True
        np.testing.assert_array_equal(attention_weights(q, k, mask), np.eye(3)[[1, 1, 1, 1]])
        np.testing.assert_allclose(rectified_attention(t64(q), t64(k), t64(v), mask).data,
                                   np.tile(v[1], (4, 1)), atol=1e-15)

    def test_random_case_matches_mask_then_softmax_oracle(self, rng):
        q, k, v = rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
        mask = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 1], [0, 0, 1]], dtype=bool)
        np.testing.assert_allclose(rectified_attention(t64(q), t64(k), t64(v), mask).data,
                                   attn_oracle(q, k, v, mask)[0], atol=1e-10, rtol=0)

    def test_disallowed_weights_are_exactly_zero(self, rng):
        q, k = rng.standard_normal((50, 4)) * 10, rng.standard_normal((6, 4))
        mask = rng.random((50, 6)) < 0.4
        mask[:, 0] = True
        w = attention_weights(q, k, mask)
        assert np.all(w[~mask] == 0.0)

    def test_row_without_allowed_token(self, rng):
        with pytest.raises(RectificationError):
            RegionMask(np.array([[True, False], [False, False]]))
        with pytest.raises(RectificationError):
            rectified_attention(t64(np.ones((2, 2))), t64(np.ones((2, 2))), t64(np.ones((2, 2))),
                                np.array([[True, False], [False, False]]))


class TestSelfSimilarity:
    def test_unit_window_is_square_sum(self, rng):
        q = rng.standard_normal((3, 4, 5))
        np.testing.assert_allclose(self_similarity_map(t64(q), 1).data[0], (q ** 2).sum(0), atol=1e-14)

    def test_all_ones_hand_execution(self):
        ss = self_similarity_map(t64(np.ones((2, 3, 3))), 3).data
        np.testing.assert_array_equal(ss[:, 1, 1], np.full(9, 2.0))
        corner = ss[:, 0, 0].reshape(3, 3)
        # window offsets (di, dj) in {-1, 0, 1}; only (0|1, 0|1) land in the grid
        np.testing.assert_array_equal(corner, [[0, 0, 0], [0, 2, 2], [0, 2, 2]])

    def test_shape(self, rng):
        assert self_similarity_map(t64(rng.standard_normal((4, 5, 7))), 3).shape == (9, 5, 7)

    @pytest.mark.parametrize("k", [0, 2, 4, -1])
    def test_bad_window(self, rng, k):
        with pytest.raises(ParameterError):
            self_similarity_map(t64(rng.standard_normal((1, 3, 3))), k)

    def test_window_larger_than_allowed(self, rng):
        with pytest.raises(ParameterError):
            self_similarity_map(t64(rng.standard_normal((1, 2, 2))), 7)

    def test_batched_matches_unbatched(self, rng):
        q = rng.standard_normal((2, 3, 5, 4))
        out = self_similarity_map(t64(q), 3).data
        for b in range(2):
            np.testing.assert_array_equal(out[b], self_similarity_map(t64(q[b]), 3).data)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 7), st.integers(1, 7), st.sampled_from([1, 3, 5]),
           st.integers(0, 2**16))
    def test_matches_loop_oracle(self, C, H, W, k, seed):
        if k > 2 * min(H, W) + 1:
            k = 1
        q = np.random.default_rng(seed).standard_normal((C, H, W))
        np.testing.assert_allclose(self_similarity_map(t64(q), k).data, ss_oracle(q, k), atol=1e-12, rtol=0)

    def test_gradient(self, rng):
        q = t64(rng.standard_normal((2, 4, 3)))
        w = rng.standard_normal((9, 4, 3))
        assert nc.grad_check(lambda: nc.sum(nc.mul(self_similarity_map(q, 3), w)), {"q": q}) < 1e-6


class TestExpandSimilarity:
    def test_zero_input_zero_bias_gives_zero(self, rng):
        params = ConvExpand(9, 6, rng)
        params.conv1.bias.data[...] = 0
        params.conv2.bias.data[...] = 0
        assert np.all(expand_similarity(np.zeros((9, 8, 8), dtype=np.float32), params).data == 0)

    def test_shape_and_nonnegative(self, rng):
        out = expand_similarity(rng.standard_normal((9, 8, 8)).astype(np.float32), ConvExpand(9, 6, rng)).data
        assert out.shape == (6, 8, 8) and out.min() >= 0

    def test_matches_chained_conv_oracle(self, rng):
        with nc.precision(np.float64):
            params = ConvExpand(9, 5, rng)
        ss = rng.standard_normal((9, 6, 7))
        ref = expand_oracle(ss, params.conv1.weight.data, params.conv1.bias.data,
                            params.conv2.weight.data, params.conv2.bias.data)
        np.testing.assert_allclose(expand_similarity(t64(ss), params).data, ref, atol=1e-10, rtol=0)

    def test_hidden_width_default(self, rng):
        assert ConvExpand(9, 6, rng).conv1.weight.shape[0] == 9
        assert ConvExpand(1, 6, rng).conv1.weight.shape[0] == 6

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            expand_similarity(np.zeros((4, 5, 5)), ConvExpand(9, 6, rng))


class TestScaAttend:
    def test_zero_logits_average_values(self, rng):
        v = rng.standard_normal((6, 3))
        out = sca_attend(np.zeros((6, 2, 2)), t64(v)).data
        np.testing.assert_allclose(out, np.tile(v.mean(0), (4, 1)), atol=1e-14)

    def test_dominant_token(self, rng):
        v = rng.standard_normal((4, 3))
        m = np.zeros((4, 3, 3))
        m[2] = 20.0
        np.testing.assert_allclose(sca_attend(t64(m), t64(v)).data, np.tile(v[2], (9, 1)), atol=1e-6)

    def test_shape(self, rng):
        with nc.precision(np.float64):
            proj = nc.Linear(8, 8, rng)
        assert sca_attend(t64(rng.standard_normal((6, 8, 8))), t64(rng.standard_normal((6, 8))), proj).shape == (64, 8)

    def test_matches_oracle(self, rng):
        m, v = rng.standard_normal((5, 3, 4)) * 3, rng.standard_normal((5, 2))
        np.testing.assert_allclose(sca_attend(t64(m), t64(v)).data, sca_oracle(m, v), atol=1e-10, rtol=0)

    def test_token_count_mismatch(self, rng):
        with pytest.raises(DimensionError):
            sca_attend(np.zeros((5, 2, 2)), np.zeros((4, 3)))


class TestFusion:
    def test_closed_gate_is_bitwise_rca(self, rng):
        a = rng.standard_normal((4, 3)).astype(np.float32)
        out = sfe_fuse(a, rng.standard_normal((4, 3)).astype(np.float32), FusionGate())
        assert out.data.tobytes() == a.tobytes()

    def test_hand_arithmetic(self):
        with nc.precision(np.float64):
            gate = FusionGate(np.arctanh(0.5))
        out = sfe_fuse(t64([1.0, 2.0]), t64([2.0, -2.0]), gate)
        np.testing.assert_allclose(out.data, [2.0, 1.0], atol=1e-15)

    def test_saturated_gate(self):
        out = sfe_fuse(t64([1.0, 2.0]), t64([2.0, -2.0]), FusionGate(10.0))
        np.testing.assert_allclose(out.data, [3.0, 0.0], atol=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            sfe_fuse(t64([1.0, 2.0]), t64([1.0]), FusionGate())

    def test_gate_weight_in_open_interval(self):
        assert -1 < FusionGate(-5.0).weight < 0 < FusionGate(5.0).weight < 1
        assert FusionGate().weight == 0.0


class TestSFEBlock:
    @pytest.fixture
    def block(self, rng):
        return SFEBlock(8, 6, 4, rng, attn_dim=8, k=3, groups=4)

    def _inputs(self, rng):
        x = rng.standard_normal((2, 8, 4, 4)).astype(np.float32)
        ctx = rng.standard_normal((2, 4, 6)).astype(np.float32)
        mask = np.eye(4, dtype=bool)[rng.integers(0, 4, (2, 16))]
        return x, ctx, mask

    def test_closed_gate_equals_rca_path(self, block, rng):
        x, ctx, mask = self._inputs(rng)
        out = block(x, ctx, mask).data
        tokens = nc.reshape(block.norm(nc.Tensor(x)), (2, 8, 16)).swapaxes(-1, -2)
        a = block.attn
        rca = rectified_attention(a.to_q(tokens), a.to_k(ctx), a.to_v(ctx), mask, a.proj)
        expected = x + rca.data.swapaxes(-1, -2).reshape(x.shape)
        assert out.tobytes() == expected.tobytes()

    def test_open_gate_changes_output(self, block, rng):
        x, ctx, mask = self._inputs(rng)
        closed = block(x, ctx, mask).data
        block.gate.beta.data[...] = 0.5
        assert not np.array_equal(block(x, ctx, mask).data, closed)

    def test_capture(self, block, rng):
        x, ctx, mask = self._inputs(rng)
        captured = []
        block(x, ctx, mask, capture=captured)
        (maps,) = captured
        assert isinstance(maps, SimilarityMaps)
        assert maps.ss.shape == (2, 9, 4, 4) and maps.m.shape == (2, 4, 4, 4)
        assert maps.m.min() >= 0 and maps.half_window == 1


class TestHeatMap:
    def test_normalized_range(self, rng):
        h = heat_map(rng.random((6, 5, 5)))
        assert h.min() == 0.0 and h.max() == 1.0

    def test_constant_map_is_zero(self):
        np.testing.assert_array_equal(heat_map(np.full((3, 4, 4), 2.5)), np.zeros((4, 4)))

    def test_constant_features_give_constant_interior(self):
        # every interior pixel sees the same full neighbourhood; only the border differs
        ss = self_similarity_map(t64(np.full((3, 6, 6), 0.7)), 3).data
        h = heat_map(ss)
        interior = h[1:-1, 1:-1]
        assert np.all(interior == interior[0, 0])
        assert not np.all(h == interior[0, 0])


def test_attention_module_shapes(rng):
    attn = Attention(8, 4, rng, context_dim=6, out_dim=5)
    out = attn(rng.standard_normal((2, 10, 8)).astype(np.float32), rng.standard_normal((2, 3, 6)).astype(np.float32))
    assert out.shape == (2, 10, 5)
