import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coherdiff import numcore as nc
from coherdiff.errors import CheckpointError, DimensionError, EvaluationError, MaskingError
from coherdiff.oracle import conv_oracle, matmul_oracle, resize_oracle, softmax_oracle


def t64(a):
    return nc.Tensor(np.asarray(a, dtype=np.float64))


class TestMatmul:
    def test_identity(self):
        x = t64([[1.5, -2.0], [3.0, 0.25]])
        np.testing.assert_array_equal(nc.matmul(t64(np.eye(2)), x).data, x.data)

    def test_hand_arithmetic(self):
        out = nc.matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
        np.testing.assert_allclose(nc.matmul(t64(a), t64(b)).data, matmul_oracle(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nc.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nc.softmax(t64([0, 0, 0])).data, [1 / 3] * 3, atol=1e-15)

    def test_single_survivor(self):
        np.testing.assert_array_equal(nc.softmax(t64([-np.inf, 0])).data, [0, 1])

    def test_matches_direct_evaluation(self):
        np.testing.assert_allclose(nc.softmax(t64([1, 2, 3])).data, softmax_oracle([1, 2, 3]), atol=1e-12)

    def test_all_masked_row_is_an_error(self):
        with pytest.raises(MaskingError):
            nc.softmax(t64([[0.0, 1.0], [2.0, 3.0]]), mask=np.array([[True, False], [False, False]]))

    def test_stable_for_large_logits(self):
        out = nc.softmax(t64([1000.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_rows_are_probability_vectors(self, row):
        out = nc.softmax(nc.Tensor(np.array(row, dtype=np.float32))).data
        assert np.all(out >= 0) and np.all(out <= 1)
        assert abs(out.sum() - 1) < 1e-6


class TestConv2d:
    def test_unit_kernel_is_identity(self):
        x = t64(np.random.default_rng(1).standard_normal((1, 4, 5)))
        out = nc.conv2d(x, t64(np.ones((1, 1, 1, 1))), t64([0.0]))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_input(self):
        out = nc.conv2d(t64(np.zeros((2, 5, 5))), t64(np.ones((3, 2, 3, 3))), t64(np.zeros(3)))
        np.testing.assert_array_equal(out.data, 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        cin, cout, H, W = rng.integers(1, 5, 4) + 2
        k = int(rng.choice([1, 3, 5]))
        x, w, b = rng.standard_normal((cin, H, W)), rng.standard_normal((cout, cin, k, k)), rng.standard_normal(cout)
        out = nc.conv2d(t64(x), t64(w), t64(b))
        assert out.shape == (cout, H, W)
        np.testing.assert_allclose(out.data, conv_oracle(x, w, b), atol=1e-10, rtol=0)

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(3)
        x, w = rng.standard_normal((3, 2, 6, 6)), rng.standard_normal((4, 2, 3, 3))
        batched = nc.conv2d(t64(x), t64(w)).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], nc.conv2d(t64(x[i]), t64(w)).data, atol=1e-14)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            nc.conv2d(t64(np.zeros((2, 4, 4))), t64(np.zeros((1, 3, 3, 3))))


class TestResizeNearest:
    def test_block_replication(self):
        m = np.array([[0, 1], [2, 3]])
        expected = np.repeat(np.repeat(m, 2, 0), 2, 1)
        np.testing.assert_array_equal(nc.resize_nearest(m, 4, 4), expected)

    def test_identity_size(self):
        m = np.arange(12).reshape(3, 4)
        np.testing.assert_array_equal(nc.resize_nearest(m, 3, 4), m)

    def test_matches_floor_scaling_oracle(self):
        m = np.arange(9).reshape(3, 3)
        np.testing.assert_array_equal(nc.resize_nearest(m, 5, 5), resize_oracle(m, 5, 5))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**16))
    def test_labels_subset_and_idempotent(self, h, w, H, W, seed):
        m = np.random.default_rng(seed).integers(0, 5, (h, w))
        out = nc.resize_nearest(m, H, W)
        assert set(np.unique(out)) <= set(np.unique(m))
        np.testing.assert_array_equal(nc.resize_nearest(out, H, W), out)
        np.testing.assert_array_equal(out, resize_oracle(m, H, W))


class TestGradients:
    def test_sum_has_unit_gradient(self):
        x = t64(np.random.default_rng(0).standard_normal((3, 4)))
        with nc.GradTape() as tape:
            tape.watch({"x": x})
            loss = nc.sum(x)
        np.testing.assert_array_equal(tape.gradient(loss)["x"], np.ones((3, 4)))
        assert nc.grad_check(lambda: nc.sum(x), {"x": x}) < 1e-9

    def test_half_square_gradient_is_identity(self):
        x = t64(np.random.default_rng(1).standard_normal(6))
        f = lambda: nc.mul(nc.sum(nc.square(x)), 0.5)  # noqa: E731
        with nc.GradTape() as tape:
            tape.watch({"x": x})
            loss = f()
        np.testing.assert_allclose(tape.gradient(loss)["x"], x.data, atol=1e-15)
        assert nc.grad_check(f, {"x": x}) < 1e-9

    def test_untouched_parameter_gets_zero(self):
        x, unused = t64([1.0, 2.0]), t64([[3.0]])
        with nc.GradTape() as tape:
            tape.watch({"x": x, "unused": unused})
            loss = nc.sum(nc.square(x))
        grads = tape.gradient(loss)
        np.testing.assert_array_equal(grads["unused"], [[0.0]])

    def test_non_finite_loss_is_an_evaluation_error(self):
        x = t64([0.0])
        with pytest.raises(EvaluationError):
            nc.grad_check(lambda: nc.sum(nc.log(x)), {"x": x})

    def test_no_recording_without_tape(self):
        x = t64([1.0])
        x.requires_grad = True
        assert not nc.add(x, x).requires_grad

    def test_randomized_backward_agreement(self):
        # 100 trials over matmul, softmax, conv2d and the fused attention
        rng = np.random.default_rng(2024)
        worst = 0.0
        for trial in range(100):
            kind = trial % 4
            if kind == 0:
                a, b = t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((4, 2)))
                w = rng.standard_normal((3, 2))
                f, params = (lambda: nc.sum(nc.mul(nc.matmul(a, b), w))), {"a": a, "b": b}
            elif kind == 1:
                x = t64(rng.standard_normal((3, 5)))
                w = rng.standard_normal((3, 5))
                mask = rng.random((3, 5)) < 0.7
                mask[:, 0] = True
                f, params = (lambda: nc.sum(nc.mul(nc.softmax(x, mask=mask), w))), {"x": x}
            elif kind == 2:
                x, k = t64(rng.standard_normal((2, 2, 4, 5))), t64(rng.standard_normal((3, 2, 3, 3)))
                b = t64(rng.standard_normal(3))
                w = rng.standard_normal((2, 3, 4, 5))
                f, params = (lambda: nc.sum(nc.mul(nc.conv2d(x, k, b), w))), {"x": x, "k": k, "b": b}
            else:
                q, k, v = (t64(rng.standard_normal(s)) for s in [(4, 3), (5, 3), (5, 2)])
                w = rng.standard_normal((4, 2))
                f, params = (lambda: nc.sum(nc.mul(nc.attention(q, k, v), w))), {"q": q, "k": k, "v": v}
            worst = max(worst, nc.grad_check(f, params))
        assert worst < 1e-4

    @pytest.mark.parametrize("op", ["group_norm", "avg_pool2d", "upsample", "silu", "embedding", "gate_add"])
    def test_layer_primitives(self, op):
        rng = np.random.default_rng(5)
        x = t64(rng.standard_normal((2, 4, 4, 4)))
        w = rng.standard_normal
        if op == "group_norm":
            gw, gb = t64(w(4)), t64(w(4))
            f, params = (lambda: nc.sum(nc.mul(nc.group_norm(x, 2, gw, gb), w((2, 4, 4, 4))))), {"x": x, "gw": gw, "gb": gb}
            proj = w((2, 4, 4, 4))
            f = lambda: nc.sum(nc.mul(nc.group_norm(x, 2, gw, gb), proj))  # noqa: E731
        elif op == "avg_pool2d":
            proj = w((2, 4, 2, 2))
            f, params = (lambda: nc.sum(nc.mul(nc.avg_pool2d(x), proj))), {"x": x}
        elif op == "upsample":
            proj = w((2, 4, 8, 8))
            f, params = (lambda: nc.sum(nc.mul(nc.upsample_nearest2d(x), proj))), {"x": x}
        elif op == "silu":
            proj = w((2, 4, 4, 4))
            f, params = (lambda: nc.sum(nc.mul(nc.silu(x), proj))), {"x": x}
        elif op == "embedding":
            table = t64(w((6, 3)))
            ids = np.array([[0, 2, 2], [5, 1, 0]])
            proj = w((2, 3, 3))
            f, params = (lambda: nc.sum(nc.mul(nc.embedding(table, ids), proj))), {"table": table}
        else:
            y, gate = t64(w((2, 4, 4, 4))), t64(np.array(0.3))
            f, params = (lambda: nc.sum(nc.square(nc.gate_add(x, y, gate)))), {"x": x, "y": y, "gate": gate}
        assert nc.grad_check(f, params) < 1e-6


class TestDeterminism:
    def test_forward_ops_bitwise_repeatable(self):
        rng = np.random.default_rng(9)
        x = nc.Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        w = nc.Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        a = nc.softmax(nc.conv2d(x, w)).data
        b = nc.softmax(nc.conv2d(x, w)).data
        assert a.tobytes() == b.tobytes()


class TestContainer:
    def test_round_trip_is_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b.c": rng.standard_normal(5),
                   "scalar": np.array(0.0), "ids": np.arange(4, dtype=np.int64)}
        path = tmp_path / "x.bin"
        nc.save_tensors(path, tensors, {"step": 3})
        loaded, meta = nc.load_tensors(path)
        assert meta == {"step": 3}
        for name, arr in tensors.items():
            assert loaded[name].dtype == arr.dtype and loaded[name].tobytes() == arr.tobytes()

    def test_layout_is_documented_one(self, tmp_path):
        path = tmp_path / "x.bin"
        nc.save_tensors(path, {"w": np.array([1.0, 2.0], dtype=np.float32)})
        raw = path.read_bytes()
        assert raw[:8] == b"CDTNSR01"
        n = int.from_bytes(raw[8:16], "little")
        assert raw[16:16 + n] == b'{"w":{"byte_offset":0,"dtype":"<f4","shape":[2]}}'
        assert raw[16 + n:] == np.array([1.0, 2.0], dtype="<f4").tobytes()

    @pytest.mark.parametrize("cut", [4, 20, -1])
    def test_truncated_file_is_rejected(self, tmp_path, cut):
        path = tmp_path / "x.bin"
        nc.save_tensors(path, {"w": np.ones((4, 4))})
        path.write_bytes(path.read_bytes()[:cut])
        with pytest.raises(CheckpointError):
            nc.load_tensors(path)

    def test_trailing_garbage_is_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        nc.save_tensors(path, {"w": np.ones(2)})
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(CheckpointError):
            nc.load_tensors(path)
