import numpy as np
import pytest

from fsrwkv import engine
from fsrwkv.engine import Tensor

from conftest import gradcheck, leaf


def conv2d_ref(x, w, b, stride, padding, groups):
    """Direct-definition cross-correlation, loops over every output element."""
    B, cin, H, W = x.shape
    cout, cin_g, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    co_per_g = cout // groups
    out = np.zeros((B, cout, Ho, Wo), dtype=x.dtype)
    for bi in range(B):
        for co in range(cout):
            gidx = co // co_per_g
            for ho in range(Ho):
                for wo in range(Wo):
                    acc = 0.0
                    for ci in range(cin_g):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (
                                    w[co, ci, i, j]
                                    * xp[bi, gidx * cin_g + ci, ho * stride + i, wo * stride + j]
                                )
                    out[bi, co, ho, wo] = acc
    if b is not None:
        out += b[None, :, None, None]
    return out


class TestArithmetic:
    def test_add_mul_broadcast(self, rng):
        a = leaf(rng, (3, 1, 4))
        b = leaf(rng, (4,))
        gradcheck(lambda: ((a + b) * b - a).sum(), [a, b])

    def test_div(self, rng):
        a = leaf(rng, (2, 3))
        b = leaf(rng, (2, 3))
        b.data += 3.0
        gradcheck(lambda: (a / b).sum(), [a, b])

    def test_scalar_ops(self, rng):
        a = leaf(rng, (5,))
        out = (2.0 * a + 1.0 - a / 4.0) * 0.5
        assert np.allclose(out.data, (2.0 * a.data + 1.0 - a.data / 4.0) * 0.5)
        gradcheck(lambda: ((2.0 * a + 1.0 - a / 4.0) * 0.5).sum(), [a])

    def test_rsub_rdiv(self, rng):
        a = leaf(rng, (4,))
        a.data += 4.0
        gradcheck(lambda: (1.0 - a).sum() + (1.0 / a).sum(), [a])

    def test_power(self, rng):
        a = leaf(rng, (6,))
        a.data = np.abs(a.data) + 0.5
        gradcheck(lambda: engine.power(a, -0.5).sum(), [a])

    def test_matmul_2d_and_3d(self, rng):
        a2 = leaf(rng, (3, 4))
        a3 = leaf(rng, (2, 3, 4))
        w = leaf(rng, (4, 5))
        gradcheck(lambda: (a2 @ w).sum(), [a2, w])
        gradcheck(lambda: ((a3 @ w) * (a3 @ w)).sum(), [a3, w])

    def test_matmul_rejects_bad_ranks(self, rng):
        a = leaf(rng, (2, 2, 2, 2))
        w = leaf(rng, (2, 2))
        with pytest.raises(ValueError):
            engine.matmul(a, w)


class TestElementwise:
    def test_unary_chain(self, rng):
        a = leaf(rng, (3, 3), scale=0.5)
        gradcheck(lambda: (a.exp() + a.sigmoid() + a.relu()).sum(), [a])

    def test_log_sqrt(self, rng):
        a = leaf(rng, (7,))
        a.data = np.abs(a.data) + 0.5
        gradcheck(lambda: (a.log() + a.sqrt()).sum(), [a])

    def test_abs(self, rng):
        a = leaf(rng, (8,))
        a.data[np.abs(a.data) < 0.1] = 0.5
        gradcheck(lambda: a.abs().sum(), [a])

    def test_sigmoid_extreme_inputs_finite(self):
        a = Tensor(np.array([-500.0, 0.0, 500.0]))
        out = engine.sigmoid(a)
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, [0.0, 0.5, 1.0])

    def test_where(self, rng):
        a = leaf(rng, (6,))
        b = leaf(rng, (6,))
        mask = a.data > 0
        gradcheck(lambda: engine.where(mask, a * a, b + 1.0).sum(), [a, b])


class TestReductionsAndShape:
    def test_sum_mean_axes(self, rng):
        a = leaf(rng, (2, 3, 4))
        gradcheck(lambda: a.sum(axis=(0, 2)).mean(), [a])
        gradcheck(lambda: (a.mean(axis=1, keepdims=True) * a).sum(), [a])

    def test_reshape_transpose(self, rng):
        a = leaf(rng, (2, 3, 4))
        gradcheck(lambda: (a.reshape(6, 4).transpose(1, 0) ** 2.0).sum(), [a])

    def test_concat_narrow(self, rng):
        a = leaf(rng, (2, 3))
        b = leaf(rng, (2, 5))
        gradcheck(
            lambda: (engine.narrow(engine.concat([a, b], axis=1), 1, 2, 4) ** 2.0).sum(),
            [a, b],
        )

    def test_softmax_rows_sum_to_one(self, rng):
        a = leaf(rng, (4, 7), scale=30.0)
        s = engine.softmax_lastdim(a)
        assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)
        w = rng.standard_normal((4, 7))
        gradcheck(lambda: (engine.softmax_lastdim(a) * Tensor(w)).sum(), [a])

    def test_layer_norm_stats(self, rng):
        x = leaf(rng, (5, 16), scale=3.0)
        gamma = Tensor(np.ones(16))
        beta = Tensor(np.zeros(16))
        y = engine.layer_norm(x, gamma, beta).data
        assert np.abs(y.mean(axis=-1)).max() < 1e-5
        assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-3

    def test_layer_norm_grad(self, rng):
        x = leaf(rng, (3, 8))
        gamma = leaf(rng, (8,))
        beta = leaf(rng, (8,))
        w = rng.standard_normal((3, 8))
        gradcheck(lambda: (engine.layer_norm(x, gamma, beta) * Tensor(w)).sum(), [x, gamma, beta])


class TestSpatial:
    def test_translate_moves_hot_pixel(self):
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 1] = 1.0
        out = engine.translate2d(Tensor(x), 0, 1).data
        assert out[0, 0, 2, 2] == 1.0
        assert out.sum() == 1.0
        out = engine.translate2d(Tensor(x), -1, 0).data
        assert out[0, 0, 1, 1] == 1.0

    def test_translate_zero_fill_and_grad(self, rng):
        a = leaf(rng, (2, 3, 4, 4))
        out = engine.translate2d(a, 1, -1).data
        assert np.all(out[:, :, 0, :] == 0.0)
        assert np.all(out[:, :, :, -1] == 0.0)
        w = rng.standard_normal((2, 3, 4, 4))
        gradcheck(lambda: (engine.translate2d(a, 1, -1) * Tensor(w)).sum(), [a])

    def test_translate_offscreen_is_zero(self, rng):
        a = leaf(rng, (1, 1, 3, 3))
        assert np.all(engine.translate2d(a, 5, 0).data == 0.0)

    def test_pad_replicate_matches_numpy(self, rng):
        a = leaf(rng, (2, 2, 4, 5))
        out = engine.pad2d_replicate(a, 2).data
        ref = np.pad(a.data, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="edge")
        assert np.array_equal(out, ref)
        w = rng.standard_normal(out.shape)
        gradcheck(lambda: (engine.pad2d_replicate(a, 2) * Tensor(w)).sum(), [a])

    @pytest.mark.parametrize(
        "shape,wshape,stride,padding,groups",
        [
            ((2, 3, 5, 5), (4, 3, 3, 3), 1, 1, 1),
            ((1, 2, 6, 6), (3, 2, 3, 3), 2, 1, 1),
            ((2, 4, 5, 5), (4, 1, 3, 3), 1, 1, 4),
            ((1, 4, 6, 5), (6, 2, 3, 3), 1, 0, 2),
            ((1, 2, 7, 7), (2, 2, 5, 5), 1, 2, 1),
            ((1, 3, 4, 4), (2, 3, 1, 1), 1, 0, 1),
        ],
    )
    def test_conv2d_matches_reference(self, rng, shape, wshape, stride, padding, groups):
        x = leaf(rng, shape)
        w = leaf(rng, wshape)
        b = leaf(rng, (wshape[0],))
        out = engine.conv2d(x, w, b, stride=stride, padding=padding, groups=groups)
        ref = conv2d_ref(x.data, w.data, b.data, stride, padding, groups)
        assert out.shape == ref.shape
        assert np.allclose(out.data, ref, atol=1e-12)
        probe = rng.standard_normal(ref.shape)
        gradcheck(
            lambda: (
                engine.conv2d(x, w, b, stride=stride, padding=padding, groups=groups) * Tensor(probe)
            ).sum(),
            [x, w, b],
        )

    def test_conv2d_no_bias(self, rng):
        x = leaf(rng, (1, 2, 4, 4))
        w = leaf(rng, (3, 2, 3, 3))
        out = engine.conv2d(x, w, None, padding=1)
        ref = conv2d_ref(x.data, w.data, None, 1, 1, 1)
        assert np.allclose(out.data, ref, atol=1e-12)
        gradcheck(lambda: (engine.conv2d(x, w, None, padding=1) ** 2.0).sum(), [x, w])

    def test_conv2d_rejects_channel_mismatch(self, rng):
        x = leaf(rng, (1, 3, 4, 4))
        w = leaf(rng, (4, 2, 3, 3))
        with pytest.raises(ValueError):
            engine.conv2d(x, w, None)

    def test_upsample_nearest(self, rng):
        a = leaf(rng, (2, 3, 3, 4))
        out = engine.upsample_nearest2x(a).data
        assert out.shape == (2, 3, 6, 8)
        assert np.array_equal(out[:, :, ::2, ::2], a.data)
        assert np.array_equal(out[:, :, 1::2, 1::2], a.data)
        w = rng.standard_normal(out.shape)
        gradcheck(lambda: (engine.upsample_nearest2x(a) * Tensor(w)).sum(), [a])


class TestGraph:
    def test_diamond_accumulation(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = Tensor(np.array(4.0), requires_grad=True)
        z = x * y + x
        z.backward()
        assert x.grad == pytest.approx(5.0)
        assert y.grad == pytest.approx(3.0)

    def test_reused_node(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        h = x * x
        z = h + h
        z.backward()
        assert x.grad == pytest.approx(8.0)

    def test_no_grad_builds_leaves(self, rng):
        a = leaf(rng, (3,))
        with engine.no_grad():
            out = (a * a).sum()
        assert not out.requires_grad
        assert out._backward is None

    def test_dtype_preserved(self, rng):
        a = Tensor(rng.standard_normal((3,)).astype(np.float32), requires_grad=True)
        out = (a.sigmoid() * 2.0).sum()
        assert out.dtype == np.float32
        out.backward()
        assert a.grad.dtype == np.float32

    def test_backward_grad_seed(self, rng):
        a = leaf(rng, (4,))
        out = a * 2.0
        out.backward(np.ones(4) * 3.0)
        assert np.allclose(a.grad, 6.0)
