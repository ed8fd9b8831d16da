import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divgate import tensor as T
from divgate.tensor import NonFiniteValues, ParamStore, ShapeMismatch, Tensor


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=shape).astype(np.float32)


class TestBasics:
    def test_softmax_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor([0.0])).item() == pytest.approx(0.5)

    def test_conv_all_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3), np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), np.float32))
        out = T.conv2d(x, w, stride=1, pad=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(9.0)

    def test_shape_mismatch_names_both_shapes(self):
        a, b = Tensor(rand((2, 3))), Tensor(rand((4, 5)))
        with pytest.raises(ShapeMismatch, match=r"\(2, 3\).*\(4, 5\)"):
            T.add(a, b)

    def test_nonfinite_rejected(self):
        with pytest.raises(NonFiniteValues):
            Tensor([1.0, np.nan])
        with pytest.raises(NonFiniteValues):
            Tensor([np.inf])

    def test_matmul_inner_dim_check(self):
        with pytest.raises(ShapeMismatch):
            T.matmul(Tensor(rand((2, 3))), Tensor(rand((4, 2))))

    def test_conv_channel_mismatch(self):
        x, w = Tensor(rand((1, 3, 8, 8))), Tensor(rand((4, 2, 3, 3)))
        with pytest.raises(ShapeMismatch, match=r"channels"):
            T.conv2d(x, w)

    def test_backward_needs_scalar(self):
        t = Tensor(rand((2, 2)), requires_grad=True)
        with pytest.raises(ShapeMismatch):
            T.mul(t, t).backward()

    def test_quadratic_gradient(self):
        w = Tensor([3.0], requires_grad=True)
        (w**2).backward()
        assert w.grad[0] == pytest.approx(6.0)

    def test_broadcast_gradient_shapes(self):
        a = Tensor(rand((4, 3)), requires_grad=True)
        b = Tensor(rand((1, 3)), requires_grad=True)
        T.sum_(T.mul(a, b)).backward()
        assert a.grad.shape == (4, 3) and b.grad.shape == (1, 3)
        np.testing.assert_allclose(b.grad, a.data.sum(axis=0, keepdims=True), rtol=1e-5)

    def test_no_grad_suppresses_graph(self):
        a = Tensor(rand((2, 2)), requires_grad=True)
        with T.no_grad():
            out = T.mul(a, a)
        assert not out.requires_grad and out._backward is None


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 6))
    def test_softmax_rows_sum_to_one(self, seed, rows, cols):
        x = Tensor(np.random.default_rng(seed).normal(0, 3, (rows, cols)).astype(np.float32))
        y = T.softmax(x, axis=-1).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
    def test_concat_split_identity_bit_exact(self, seed, a_ch, b_ch, rest):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(2, a_ch, rest)).astype(np.float32))
        b = Tensor(rng.normal(size=(2, b_ch, rest)).astype(np.float32))
        joined = T.concat([a, b], axis=1)
        pa, pb = T.split(joined, [a_ch, b_ch], axis=1)
        assert np.array_equal(pa.data, a.data) and np.array_equal(pb.data, b.data)

    def test_split_sizes_must_cover(self):
        with pytest.raises(ShapeMismatch):
            T.split(Tensor(rand((2, 5))), [2, 2], axis=1)


class TestNormalization:
    def test_group_norm_stats(self):
        x = Tensor(rand((4, 8, 6, 6), seed=3, lo=-2, hi=5))
        g = Tensor(np.ones(8, np.float32))
        b = Tensor(np.zeros(8, np.float32))
        y = T.group_norm(x, g, b, groups=4).data.reshape(4, 4, -1)
        assert np.abs(y.mean(axis=2)).max() <= 1e-4
        assert np.abs(y.var(axis=2) - 1.0).max() <= 1e-3

    def test_batch_norm_train_stats(self):
        x = Tensor(rand((8, 3, 5, 5), seed=4, lo=-3, hi=3))
        g, b = Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32))
        rm = Tensor(np.zeros(3, np.float32))
        rv = Tensor(np.ones(3, np.float32))
        y = T.batch_norm(x, g, b, rm, rv, train=True).data
        assert np.abs(y.mean(axis=(0, 2, 3))).max() <= 1e-4
        assert np.abs(y.var(axis=(0, 2, 3)) - 1.0).max() <= 1e-3

    def test_batch_norm_running_average_momentum(self):
        x = Tensor(np.full((4, 2, 2, 2), 3.0, np.float32))
        g, b = Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32))
        rm = Tensor(np.zeros(2, np.float32))
        rv = Tensor(np.ones(2, np.float32))
        T.batch_norm(x, g, b, rm, rv, train=True)
        np.testing.assert_allclose(rm.data, 0.9 * 0.0 + 0.1 * 3.0, rtol=1e-6)

    def test_batch_norm_eval_uses_running(self):
        x = Tensor(rand((4, 2, 3, 3), seed=5))
        g, b = Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32))
        rm = Tensor(np.array([0.5, -0.5], np.float32))
        rv = Tensor(np.array([4.0, 0.25], np.float32))
        y = T.batch_norm(x, g, b, rm, rv, train=False).data
        expect = (x.data - rm.data.reshape(1, 2, 1, 1)) / np.sqrt(rv.data.reshape(1, 2, 1, 1) + 1e-5)
        np.testing.assert_allclose(y, expect, rtol=1e-5)

    def test_batch_norm_update_flag_freezes_buffers(self):
        x = Tensor(rand((4, 2, 3, 3), seed=6))
        g, b = Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32))
        rm, rv = Tensor(np.zeros(2, np.float32)), Tensor(np.ones(2, np.float32))
        before = rm.data.copy(), rv.data.copy()
        T.batch_norm(x, g, b, rm, rv, train=True, update=False)
        assert np.array_equal(rm.data, before[0]) and np.array_equal(rv.data, before[1])


class TestPoolingAndMovement:
    def test_global_avg_pool(self):
        x = Tensor(rand((2, 3, 4, 4), seed=7))
        np.testing.assert_allclose(T.global_avg_pool(x).data, x.data.mean(axis=(2, 3)), rtol=1e-6)

    def test_windowed_avg_pool(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        y = T.avg_pool(x, 2).data
        np.testing.assert_allclose(y[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_avg_pool_divisibility(self):
        with pytest.raises(ShapeMismatch):
            T.avg_pool(Tensor(rand((1, 1, 5, 5))), 2)

    def test_upsample_nearest(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], np.float32))
        y = T.upsample_nearest(x, 2).data
        np.testing.assert_array_equal(y[0, 0, :2, :2], 1.0)
        np.testing.assert_array_equal(y[0, 0, 2:, 2:], 4.0)

    def test_transpose_roundtrip_gradient(self):
        x = Tensor(rand((2, 3, 4), seed=8), requires_grad=True)
        T.sum_(T.mul(T.transpose(x, (2, 0, 1)), T.transpose(x, (2, 0, 1)))).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-5)


class TestDistances:
    def test_l1(self):
        a, b = Tensor([1.0, -2.0]), Tensor([0.0, 1.0])
        assert T.l1_distance(a, b).item() == pytest.approx(4.0)

    def test_l2(self):
        a, b = Tensor([3.0, 0.0]), Tensor([0.0, 4.0])
        assert T.l2_distance(a, b).item() == pytest.approx(5.0)


class TestParamStore:
    def test_grad_allocated_and_shapes(self):
        store = ParamStore()
        t = store.add("w", rand((3, 4)))
        assert t.grad.shape == t.data.shape

    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.add("w", rand((2,)))
        with pytest.raises(ValueError, match="duplicate"):
            store.add("w", rand((2,)))

    def test_load_checks_names_and_shapes(self):
        store = ParamStore()
        store.add("a", rand((2, 2)))
        with pytest.raises(ValueError, match="mismatch"):
            store.load_arrays({"b": rand((2, 2))})
        with pytest.raises(ShapeMismatch):
            store.load_arrays({"a": rand((3, 3))})

    def test_trainable_filter(self):
        store = ParamStore()
        store.add("w", rand((2,)))
        store.add("buf", rand((2,)), trainable=False)
        assert [n for n, _ in store.trainable_items()] == ["w"]
