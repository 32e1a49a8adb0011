import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavaec.tensor import AdamState, Tensor, adam_step, clip_grad_norm, no_grad, ops, use_dtype
from wavaec.tensor import checkpoint
from wavaec.tensor.gradcheck import check_gradient, random_tensor
from wavaec.tensor.ops import ShapeError


def t64(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


class TestForward:
    def test_conv1d_causal_impulse(self):
        x = np.zeros((1, 5, 1))
        x[0, 0, 0] = 1.0
        w = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)
        out = ops.conv1d_causal(t64(x), t64(w)).data[0, :, 0]
        # output t reads inputs t-2..t with the last tap on the current frame
        np.testing.assert_allclose(out, [3.0, 2.0, 1.0, 0.0, 0.0])

    def test_depthwise_matches_dense_conv_per_channel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 9, 3))
        w = rng.standard_normal((4, 3))
        dense = np.zeros((4, 3, 3))
        for c in range(3):
            dense[:, c, c] = w[:, c]
        a = ops.depthwise_conv1d_causal(t64(x), t64(w)).data
        b = ops.conv1d_causal(t64(x), t64(dense)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_softmax_uniform(self):
        out = ops.softmax(t64(np.full(7, 3.3))).data
        np.testing.assert_allclose(out, 1 / 7)

    def test_softmax_mask_zeroes_entries(self):
        mask = np.array([True, False, True])
        out = ops.softmax(t64([1.0, 50.0, 1.0]), mask=mask).data
        np.testing.assert_allclose(out, [0.5, 0.0, 0.5])

    def test_glu_saturated_gate(self):
        x = np.concatenate([np.ones(4), np.full(4, -50.0)])
        np.testing.assert_allclose(ops.glu(t64(x)).data, 0.0, atol=1e-20)

    def test_sigmoid_matches_logistic(self):
        x = np.linspace(-30, 30, 61)
        np.testing.assert_allclose(ops.sigmoid(t64(x)).data, 1 / (1 + np.exp(-x)), atol=1e-15)

    def test_layer_norm_statistics(self):
        x = np.random.default_rng(1).standard_normal((4, 16)) * 3 + 2
        out = ops.layer_norm(t64(x), t64(np.ones(16)), t64(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-3)

    def test_group_norm_single_group_equals_layer_norm(self):
        x = t64(np.random.default_rng(2).standard_normal((2, 5, 8)))
        g, b = t64(np.ones(8)), t64(np.zeros(8))
        np.testing.assert_allclose(ops.group_norm(x, 1, g, b).data, ops.layer_norm(x, g, b).data)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
            ops.matmul(t64(np.zeros((3, 4))), t64(np.zeros((5, 2))))

    def test_frame_and_overlap_add_invert(self):
        x = np.random.default_rng(3).standard_normal((2, 400))
        y = ops.overlap_add(ops.frame(t64(x), 80, 40), 40, gain=0.5).data[:, :400]
        np.testing.assert_allclose(y[:, 40:320], x[:, 40:320], atol=1e-12)

    def test_unfold_windows(self):
        x = np.arange(5.0).reshape(1, 5, 1)
        out = ops.unfold(t64(x), 3, axis=-2).data[0, :, :, 0]
        np.testing.assert_array_equal(out[2], [0.0, 1.0, 2.0])
        np.testing.assert_array_equal(out[0], [0.0, 0.0, 0.0])


class TestCausality:
    @pytest.mark.parametrize("op", ["conv", "depthwise"])
    def test_future_frame_does_not_leak(self, op):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 12, 3))
        x2 = x.copy()
        x2[0, 7:] += 1e3
        if op == "conv":
            w = t64(rng.standard_normal((4, 3, 2)))
            f = lambda z: ops.conv1d_causal(t64(z), w).data  # noqa: E731
        else:
            w = t64(rng.standard_normal((4, 3)))
            f = lambda z: ops.depthwise_conv1d_causal(t64(z), w).data  # noqa: E731
        np.testing.assert_array_equal(f(x)[:, :7], f(x2)[:, :7])


class TestBackward:
    def test_sum_of_squares(self):
        x = t64([1.0, -2.0, 3.0])
        ops.sum(ops.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_non_scalar_rejected(self):
        x = t64([1.0, 2.0])
        with pytest.raises(ValueError):
            ops.mul(x, 2.0).backward()

    def test_shared_node_visited_once(self):
        x = t64([2.0])
        y = ops.mul(x, x)
        z = ops.add(y, y)
        ops.sum(z).backward()
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_no_grad_records_nothing(self):
        x = t64([1.0])
        with no_grad():
            y = ops.mul(x, 3.0)
        assert not y.requires_grad

    def test_deep_chain_without_recursion_limit(self):
        x = t64([1.0])
        y = x
        for _ in range(5000):
            y = ops.add(y, 0.0)
        ops.sum(y).backward()
        np.testing.assert_array_equal(x.grad, [1.0])

    def test_matmul_gradient_4x5_5x3(self):
        rng = np.random.default_rng(5)
        a, b = random_tensor(rng, (4, 5)), random_tensor(rng, (5, 3))
        w = rng.standard_normal((4, 3))
        res = check_gradient(lambda x, y: ops.sum(ops.mul(ops.matmul(x, y), w)), [a, b],
                             "matmul", step=1e-3)
        assert res.passed and res.max_rel_err < 1e-4

    def test_layer_norm_gradient_8_vector(self):
        rng = np.random.default_rng(6)
        x, g, b = random_tensor(rng, (8,)), random_tensor(rng, (8,)), random_tensor(rng, (8,))
        w = rng.standard_normal(8)
        res = check_gradient(lambda *a: ops.sum(ops.mul(ops.layer_norm(*a), w)), [x, g, b],
                             "layer_norm", step=1e-3)
        assert res.passed and res.max_rel_err < 1e-4

    def test_gradcheck_catches_a_wrong_gradient(self):
        def bad(x):
            from wavaec.tensor.autograd import make_result
            return make_result(np.sum(x.data**2), (x,), lambda g: (g * x.data,))

        res = check_gradient(bad, [random_tensor(np.random.default_rng(0), (3,))], "bad")
        assert not res.passed

    @settings(max_examples=20, deadline=None)
    @given(shape=st.tuples(st.integers(1, 4), st.integers(1, 4)), seed=st.integers(0, 1000))
    def test_broadcast_add_gradient_shapes(self, shape, seed):
        rng = np.random.default_rng(seed)
        a = random_tensor(rng, shape)
        b = random_tensor(rng, (shape[1],))
        ops.sum(ops.add(a, b)).backward()
        assert a.grad.shape == a.shape
        np.testing.assert_array_equal(b.grad, np.full(shape[1], float(shape[0])))


class TestDtype:
    def test_default_float32(self):
        assert Tensor([1, 2]).dtype == np.float32

    def test_float64_build(self):
        with use_dtype(np.float64):
            assert Tensor([1, 2]).dtype == np.float64
        assert Tensor([1, 2]).dtype == np.float32


class TestAdam:
    def test_quadratic_bowl(self):
        w = Tensor(np.array([3.0, -2.0, 1.5]), requires_grad=True, dtype=np.float64)
        start = np.linalg.norm(w.data)
        state = AdamState(lr=0.1)
        for _ in range(200):
            adam_step([w], [2 * w.data], state)
        assert np.linalg.norm(w.data) < 1e-2 * start
        assert state.step == 200

    def test_zero_gradient_leaves_params(self):
        w = Tensor(np.ones(4), requires_grad=True, dtype=np.float64)
        state = AdamState()
        adam_step([w], [np.zeros(4)], state)
        np.testing.assert_array_equal(w.data, 1.0)
        assert state.step == 1

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(0)
            w = Tensor(rng.standard_normal(5), requires_grad=True)
            state = AdamState()
            for _ in range(20):
                adam_step([w], [rng.standard_normal(5).astype(np.float32)], state)
            return w.data

        np.testing.assert_array_equal(run(), run())

    def test_shape_mismatch(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            adam_step([w], [np.ones(4)], AdamState())

    def test_clip_grad_norm(self):
        grads = [np.array([3.0, 0.0]), np.array([4.0])]
        norm = clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        total = np.sqrt(sum(np.sum(g**2) for g in grads))
        assert total == pytest.approx(1.0, rel=1e-9)


class TestCheckpoint:
    def test_roundtrip_all_dtypes(self, tmp_path):
        tensors = {
            "a": np.arange(6, dtype=np.float32).reshape(2, 3),
            "b": np.array([1.5, -2.5]),
            "c": np.array([[7]], dtype=np.int64),
            "d": np.frombuffer(b"hello", dtype=np.uint8),
            "scalar": np.array(3.0),
        }
        checkpoint.save(tmp_path / "x.wck", tensors)
        back = checkpoint.load(tmp_path / "x.wck")
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].dtype == tensors[k].dtype
            np.testing.assert_array_equal(back[k], tensors[k])

    def test_bytes_are_deterministic(self):
        t = {"w": np.ones((2, 2), dtype=np.float32)}
        assert checkpoint.dumps(t) == checkpoint.dumps(t)
        assert checkpoint.dumps(t)[:8] == b"WAECKPT\0"

    def test_bad_magic(self):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(b"NOTACKPT" + bytes(8))

    def test_truncated(self):
        blob = checkpoint.dumps({"w": np.ones(10)})
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(blob[:-3])
