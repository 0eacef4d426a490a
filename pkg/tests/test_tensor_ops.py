"""Primitive ops: shapes, values, MAC counts and the gradient tape."""
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cslyolo import ops
from cslyolo.tensor import GradTape, MacCounter, ShapeError, Tensor, TapeError


def T(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype))


def naive_conv(x, w, stride, padding):
    """Loop-per-output reference convolution (cross-correlation)."""
    b, c, h, wd = x.shape
    k, _, _, n = w.shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-wd // stride)
        ph = max((ho - 1) * stride + k - h, 0)
        pw = max((wo - 1) * stride + k - wd, 0)
        top, left = ph // 2, pw // 2
    else:
        ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
        top = left = 0
    out = np.zeros((b, n, ho, wo))
    for bi in range(b):
        for o in range(n):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                y, xx = i * stride + ky - top, j * stride + kx - left
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[bi, ci, y, xx] * w[ky, kx, ci, o]
                    out[bi, o, i, j] = acc
    return out


class TestTensor:
    def test_rank_and_dims_enforced(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 0, 2, 2)))

    def test_immutable(self):
        t = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            t.data[0, 0, 0, 0] = 1.0

    def test_size_matches_shape(self):
        t = Tensor.zeros((2, 3, 4, 5))
        assert t.size == 2 * 3 * 4 * 5 == t.data.size
        assert t.dtype == np.float32
        assert t.astype(np.float64).dtype == np.float64

    def test_counter_total_is_sum(self):
        c = MacCounter()
        c.add("a", 3)
        c.add("b", 4)
        c.add("a", 1)
        assert c.total == 8 == sum(c.per_layer.values())
        with pytest.raises(ValueError):
            c.add("a", -1)


class TestConv2d:
    def test_same_padding_shape_and_macs(self, rng):
        x = T(rng.standard_normal((1, 16, 32, 32)), np.float32)
        w = T(rng.standard_normal((3, 3, 16, 16)), np.float32)
        c = MacCounter()
        y = ops.conv2d(x, w, 1, "same", counter=c, name="c")
        assert y.shape == (1, 16, 32, 32)
        assert c.per_layer["c"] == 2_359_296

    def test_ones_1x1_sums_channels(self, rng):
        x = rng.standard_normal((1, 3, 4, 4))
        y = ops.conv2d(T(x), T(np.ones((1, 1, 3, 1))))
        np.testing.assert_allclose(y.data[0, 0], x[0].sum(axis=0))

    @pytest.mark.parametrize("stride,padding,shape,k", [
        (1, "same", (2, 3, 5, 6), 3), (2, "same", (1, 2, 7, 7), 3), (2, "same", (1, 2, 6, 5), 5),
        (1, "valid", (1, 3, 6, 5), 3), (2, "valid", (1, 2, 9, 8), 3), (1, "same", (1, 2, 4, 4), 1),
    ])
    def test_matches_naive_loops(self, rng, stride, padding, shape, k):
        x = rng.standard_normal(shape)
        w = rng.standard_normal((k, k, shape[1], 3))
        y = ops.conv2d(T(x), T(w), stride, padding)
        np.testing.assert_allclose(y.data, naive_conv(x, w, stride, padding), rtol=1e-12, atol=1e-12)

    def test_bias_added_not_counted(self, rng):
        x = T(rng.standard_normal((1, 2, 3, 3)))
        w = T(rng.standard_normal((3, 3, 2, 2)))
        b = T(np.array([1.0, -2.0]).reshape(1, 2, 1, 1))
        c1, c2 = MacCounter(), MacCounter()
        y0 = ops.conv2d(x, w, counter=c1)
        y1 = ops.conv2d(x, w, bias=b, counter=c2)
        np.testing.assert_allclose(y1.data - y0.data, np.broadcast_to(b.data, y0.shape))
        assert c1.total == c2.total

    def test_shape_mismatch_names_both_shapes(self):
        x = Tensor.zeros((1, 4, 5, 5))
        w = Tensor.zeros((3, 3, 3, 2))
        with pytest.raises(ShapeError, match=r"\(3, 3, 3, 2\).*\(1, 4, 5, 5\)"):
            ops.conv2d(x, w)

    def test_even_kernel_and_bad_stride_rejected(self):
        x = Tensor.zeros((1, 1, 5, 5))
        with pytest.raises(ShapeError, match="odd"):
            ops.conv2d(x, Tensor.zeros((2, 2, 1, 1)))
        with pytest.raises(ValueError, match="stride"):
            ops.conv2d(x, Tensor.zeros((3, 3, 1, 1)), stride=3)

    def test_same_padding_extra_pixel_bottom_right(self):
        # 4x4 input, K=3 stride 2 -> out 2, total pad 1, all on the bottom/right
        x = np.zeros((1, 1, 4, 4))
        x[0, 0, 0, 0] = 1.0
        w = np.zeros((3, 3, 1, 1))
        w[0, 0, 0, 0] = 1.0
        y = ops.conv2d(T(x), T(w), 2, "same")
        assert y.data[0, 0, 0, 0] == 1.0

    @given(h=st.integers(1, 9), w=st.integers(1, 9), c=st.integers(1, 5), n=st.integers(1, 5),
           k=st.sampled_from([1, 3, 5]), stride=st.sampled_from([1, 2]), b=st.integers(1, 2))
    def test_mac_count_grid(self, h, w, c, n, k, stride, b):
        x = Tensor.zeros((b, c, h, w))
        counter = MacCounter()
        y = ops.conv2d(x, Tensor.zeros((k, k, c, n)), stride, "same", counter=counter, name="l")
        _, _, ho, wo = y.shape
        assert (ho, wo) == (math.ceil(h / stride), math.ceil(w / stride))
        assert counter.total == b * ho * wo * c * k * k * n


class TestDepthwise:
    def test_example_macs(self):
        c = MacCounter()
        y = ops.depthwise_conv2d(Tensor.zeros((1, 16, 32, 32)), Tensor.zeros((3, 3, 16, 1)), counter=c)
        assert y.shape == (1, 16, 32, 32)
        assert c.total == 147_456

    def test_multiplier_channels(self):
        y = ops.depthwise_conv2d(Tensor.zeros((1, 8, 5, 5)), Tensor.zeros((3, 3, 8, 2)))
        assert y.shape[1] == 16

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 4, 6, 5))
        w = np.zeros((3, 3, 4, 1))
        w[1, 1] = 1.0
        np.testing.assert_array_equal(ops.depthwise_conv2d(T(x), T(w)).data, x)

    def test_matches_grouped_naive(self, rng):
        x = rng.standard_normal((1, 3, 7, 6))
        w = rng.standard_normal((3, 3, 3, 2))
        y = ops.depthwise_conv2d(T(x), T(w), 2, "same")
        for c in range(3):
            for j in range(2):
                ref = naive_conv(x[:, c:c + 1], w[:, :, c:c + 1, j:j + 1], 2, "same")
                np.testing.assert_allclose(y.data[:, c * 2 + j], ref[:, 0], atol=1e-12)

    @given(c=st.integers(1, 4), m=st.integers(1, 3), k=st.sampled_from([1, 3, 5]), h=st.integers(1, 8),
           stride=st.sampled_from([1, 2]), target=st.data())
    def test_locality_and_macs(self, c, m, k, h, stride, target):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, c, h, h))
        w = rng.standard_normal((k, k, c, m))
        counter = MacCounter()
        y0 = ops.depthwise_conv2d(T(x), T(w), stride, counter=counter)
        ho = y0.shape[2]
        assert counter.total == ho * ho * c * m * k * k
        ch = target.draw(st.integers(0, c - 1))
        x2 = x.copy()
        x2[0, ch] += 1.0 + rng.random((h, h))
        y1 = ops.depthwise_conv2d(T(x2), T(w), stride)
        changed = {int(i) for i in np.nonzero(np.abs(y1.data - y0.data).sum(axis=(0, 2, 3)))[0]}
        assert changed <= set(range(ch * m, ch * m + m))


class TestPointwise:
    def test_example_macs(self):
        c = MacCounter()
        ops.pointwise_conv2d(Tensor.zeros((1, 16, 32, 32)), Tensor.zeros((1, 1, 16, 8)), counter=c)
        assert c.total == 131_072

    def test_identity(self, rng):
        x = rng.standard_normal((1, 5, 3, 3))
        y = ops.pointwise_conv2d(T(x), T(np.eye(5).reshape(1, 1, 5, 5)))
        np.testing.assert_array_equal(y.data, x)

    def test_dot_product(self):
        x = T(np.array([3.0, 5.0]).reshape(1, 2, 1, 1))
        y = ops.pointwise_conv2d(x, T(np.ones((1, 1, 2, 1))))
        assert y.data.item() == 8.0

    def test_rejects_spatial_kernel(self):
        with pytest.raises(ShapeError):
            ops.pointwise_conv2d(Tensor.zeros((1, 2, 3, 3)), Tensor.zeros((3, 3, 2, 1)))


class TestActivations:
    def test_mish_values(self):
        y = ops.mish(T(np.array([0.0, 1.0, -20.0, 800.0, -800.0]).reshape(1, 1, 1, 5))).data.ravel()
        assert y[0] == 0.0
        assert abs(y[1] - 0.8651) < 1e-4
        assert -5e-8 < y[2] < 0 and abs(y[2] + 4.122e-8) < 1e-10
        assert y[3] == 800.0
        assert y[4] == 0.0 or abs(y[4]) < 1e-300
        assert np.all(np.isfinite(y))

    def test_mish_reference(self, rng):
        x = rng.uniform(-10, 10, (1, 2, 3, 3))
        ref = x * np.tanh(np.log1p(np.exp(x)))
        np.testing.assert_allclose(ops.mish(T(x)).data, ref, rtol=1e-12)

    def test_sigmoid(self):
        y = ops.sigmoid(T(np.array([0.0, 50.0, -50.0]).reshape(1, 1, 1, 3))).data.ravel()
        assert y[0] == 0.5
        assert 0.0 <= y[2] < 1e-20 and y[1] == 1.0

    def test_zero_macs(self):
        c = MacCounter()
        x = Tensor.zeros((1, 2, 3, 3))
        ops.mish(x, counter=c, name="m")
        ops.sigmoid(x, counter=c, name="s")
        ops.affine(x, Tensor.zeros((1, 2, 1, 1)), Tensor.zeros((1, 2, 1, 1)), counter=c, name="a")
        assert c.total == 0 and set(c.per_layer) == {"m", "s", "a"}


class TestPooling:
    def test_avg_constant(self):
        y = ops.pool2d(T(np.full((1, 2, 6, 6), 3.5)), "avg", 2, 2)
        assert y.shape == (1, 2, 3, 3) and np.all(y.data == 3.5)

    def test_max_example(self):
        y = ops.pool2d(T(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)), "max", 2, 2)
        assert y.data.item() == 4.0

    def test_window_larger_than_input_rejected(self):
        with pytest.raises(ShapeError):
            ops.pool2d(Tensor.zeros((1, 1, 2, 2)), "max", 3, 1)

    def test_adaptive_global(self, rng):
        x = rng.standard_normal((2, 3, 7, 5))
        y = ops.adaptive_avg_pool(T(x), 1, 1)
        np.testing.assert_allclose(y.data, x.mean(axis=(2, 3), keepdims=True))
        np.testing.assert_allclose(ops.global_avg_pool(T(x)).data, y.data)

    def test_adaptive_bins(self, rng):
        x = rng.standard_normal((1, 1, 5, 4))
        y = ops.adaptive_avg_pool(T(x), 2, 2).data[0, 0]
        # rows split [0,3) and [2,5); cols [0,2) and [2,4)
        assert y[0, 0] == pytest.approx(x[0, 0, 0:3, 0:2].mean())
        assert y[1, 1] == pytest.approx(x[0, 0, 2:5, 2:4].mean())

    def test_adaptive_errors(self):
        with pytest.raises(ShapeError):
            ops.adaptive_avg_pool(Tensor.zeros((1, 1, 4, 4)), 0, 2)
        with pytest.raises(ShapeError):
            ops.adaptive_avg_pool(Tensor.zeros((1, 1, 4, 4)), 5, 2)


class TestResizeConcat:
    def test_upsample_example(self):
        x = T(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        y = ops.resize_nearest(x, 4, 4).data[0, 0]
        np.testing.assert_array_equal(y, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_same_size_identity(self, rng):
        x = rng.standard_normal((1, 2, 5, 3))
        np.testing.assert_array_equal(ops.resize_nearest(T(x), 5, 3).data, x)

    def test_odd_ratio_shape(self):
        assert ops.resize_nearest(Tensor.zeros((1, 2, 13, 13)), 18, 18).shape == (1, 2, 18, 18)

    def test_concat_and_add(self, rng):
        a, b = Tensor.zeros((1, 4, 8, 8)), Tensor.zeros((1, 12, 8, 8))
        assert ops.concat_channels([a, b]).shape == (1, 16, 8, 8)
        x = T(rng.standard_normal((1, 3, 2, 2)))
        np.testing.assert_array_equal(ops.add([x, Tensor.zeros((1, 3, 2, 2), np.float64)]).data, x.data)
        with pytest.raises(ShapeError):
            ops.add([x, Tensor.zeros((1, 3, 2, 3), np.float64)])
        with pytest.raises(ShapeError):
            ops.concat_channels([a, Tensor.zeros((1, 1, 4, 8))])

    @given(sizes=st.lists(st.integers(1, 5), min_size=1, max_size=4), h=st.integers(1, 4))
    def test_concat_split_roundtrip(self, sizes, h):
        rng = np.random.default_rng(len(sizes))
        parts = [T(rng.standard_normal((2, s, h, h)), np.float32) for s in sizes]
        back = ops.split_channels(ops.concat_channels(parts), sizes)
        for p, q in zip(parts, back):
            assert np.array_equal(p.data, q.data)

    def test_scale_channels(self):
        x = T(np.ones((1, 2, 2, 2)))
        s = T(np.array([0.5, 2.0]).reshape(1, 2, 1, 1))
        y = ops.scale_channels(x, s).data
        assert np.all(y[0, 0] == 0.5) and np.all(y[0, 1] == 2.0)


class TestTape:
    def test_grad_of_sum_is_ones(self, rng):
        x = T(rng.standard_normal((1, 2, 3, 3)))
        tape = GradTape()
        tape.watch(x)
        y = ops.add([x], tape=tape)
        g = tape.backward(y)
        np.testing.assert_array_equal(g[x], np.ones(x.shape))

    def test_consumed_twice_rejected(self, rng):
        x = T(rng.standard_normal((1, 1, 2, 2)))
        tape = GradTape()
        y = ops.mish(x, tape=tape)
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_visits_reverse_topological_once(self, rng):
        x = T(rng.standard_normal((1, 2, 4, 4)))
        w = T(rng.standard_normal((1, 1, 2, 2)))
        tape = GradTape()
        h = ops.pointwise_conv2d(x, w, tape=tape)
        h = ops.mish(h, tape=tape)
        h = ops.pool2d(h, "avg", 2, 2, tape=tape)
        tape.backward(h)
        assert tape.visited == ["avg_pool", "mish", "conv2d"]

    def test_pointwise_sum_gradient_matches_fd(self, rng):
        x = rng.standard_normal((1, 4, 6, 6))
        w = T(rng.standard_normal((1, 1, 4, 3)))
        xt = T(x)
        tape = GradTape()
        tape.watch(xt)
        g = tape.backward(ops.pointwise_conv2d(xt, w, tape=tape))[xt]
        eps = 1e-5
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += eps
            xm[idx] -= eps
            num[idx] = (ops.pointwise_conv2d(T(xp), w).data.sum() - ops.pointwise_conv2d(T(xm), w).data.sum()) / (2 * eps)
        rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-10)
        assert rel.max() < 1e-4

    def test_unreached_tensor_gets_zero_gradient(self, rng):
        a = T(rng.standard_normal((1, 1, 2, 2)))
        b = T(rng.standard_normal((1, 1, 2, 2)))
        tape = GradTape()
        tape.watch(a, b)
        g = tape.backward(ops.mish(a, tape=tape))
        assert np.all(g[b] == 0)
