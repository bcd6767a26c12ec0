"""Tensor kernel: forward semantics, gradients vs finite differences,
graph and stop-gradient contracts."""

import numpy as np
import pytest

from dualcam.autodiff import (Tensor, backward, bilinear_resize, conv2d,
                              global_avg_pool, linear, masked_softmax_ce,
                              multilabel_soft_margin, neg_log_one_minus_cosine,
                              no_grad, relu, stop_gradient)
from dualcam.errors import ConfigurationError, NumericError, UsageError
from dualcam.gradcheck import gradcheck
from dualcam.optim import AdamW

rng = np.random.default_rng(1234)


class TestConv2d:
    def test_identity_like_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.full((1, 1, 1, 1), 2.0))
        b = Tensor(np.zeros(1))
        out = conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_box_sum_center(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = conv2d(x, w, b, stride=1, padding=1)
        assert out.data[0, 0, 1, 1] == 9.0

    def test_dilation5_shape_and_grad(self):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=5, dilation=5)
        assert out.shape == (2, 4, 8, 8)
        res = gradcheck(lambda xx, ww, bb:
                        conv2d(xx, ww, bb, padding=5, dilation=5).sum(), [x, w, b])
        assert res.ok(tol_fraction=1.0)

    def test_stride_output_size(self):
        out = conv2d(Tensor(np.zeros((1, 2, 9, 9))), Tensor(np.zeros((3, 2, 3, 3))),
                     Tensor(np.zeros(3)), stride=2, padding=1)
        assert out.shape == (1, 3, 5, 5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))),
                   Tensor(np.zeros(3)))
        with pytest.raises(ConfigurationError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 2, 2, 2))),
                   Tensor(np.zeros(3)))

    def test_nonfinite_output_rejected(self):
        x = Tensor(np.full((1, 1, 2, 2), 1e308))
        w = Tensor(np.full((1, 1, 1, 1), 1e308))
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            conv2d(x, w, Tensor(np.zeros(1)))


class TestRelu:
    def test_basic(self):
        out = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative_zero_grad(self):
        x = Tensor(-np.abs(rng.standard_normal((3, 3))) - 0.1, requires_grad=True)
        out = relu(x)
        np.testing.assert_array_equal(out.data, np.zeros((3, 3)))
        backward(out.sum())
        np.testing.assert_array_equal(x.grad, np.zeros((3, 3)))

    def test_grad_is_indicator(self):
        # keep |x| > 1e-3 to stay away from the kink
        x = rng.standard_normal((4, 4))
        x = np.where(np.abs(x) < 1e-2, 0.5, x)
        res = gradcheck(lambda t: relu(t).sum(), [x])
        assert res.ok(tol_fraction=1.0)


class TestLinear:
    def test_basis_vector(self):
        out = linear(Tensor(np.array([[1.0, 0.0]])),
                     Tensor(np.array([[3.0, 5.0], [7.0, 11.0]])),
                     Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [[3.0, 7.0]])

    def test_identity_weight(self):
        x = rng.standard_normal((3, 4))
        out = linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x)

    def test_gradcheck(self):
        res = gradcheck(lambda x, w, b: linear(x, w, b).sum(),
                        [rng.standard_normal((4, 8)), rng.standard_normal((3, 8)),
                         rng.standard_normal(3)])
        assert res.ok(tol_fraction=1.0)


class TestGlobalAvgPool:
    def test_constant(self):
        out = global_avg_pool(Tensor(np.full((1, 2, 4, 4), 3.0)))
        np.testing.assert_allclose(out.data, np.full((1, 2), 3.0))

    def test_small_map(self):
        out = global_avg_pool(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)))
        assert out.data[0, 0] == 2.5

    def test_grad_uniform(self):
        x = Tensor(rng.standard_normal((1, 1, 3, 5)), requires_grad=True)
        backward(global_avg_pool(x).sum())
        np.testing.assert_allclose(x.grad, np.full((1, 1, 3, 5), 1.0 / 15))
        res = gradcheck(lambda t: global_avg_pool(t).sum(),
                        [rng.standard_normal((2, 3, 4, 4))])
        assert res.ok(tol_fraction=1.0)


def _bilinear_oracle(x, out_h, out_w):
    """Brute-force half-pixel bilinear interpolation of the last two axes."""
    in_h, in_w = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (out_h, out_w))
    for o in range(out_h):
        sy = (o + 0.5) * in_h / out_h - 0.5
        y0 = int(np.floor(sy))
        fy = sy - y0
        y0c, y1c = np.clip([y0, y0 + 1], 0, in_h - 1)
        for p in range(out_w):
            sx = (p + 0.5) * in_w / out_w - 0.5
            x0 = int(np.floor(sx))
            fx = sx - x0
            x0c, x1c = np.clip([x0, x0 + 1], 0, in_w - 1)
            out[..., o, p] = ((1 - fy) * (1 - fx) * x[..., y0c, x0c]
                              + (1 - fy) * fx * x[..., y0c, x1c]
                              + fy * (1 - fx) * x[..., y1c, x0c]
                              + fy * fx * x[..., y1c, x1c])
    return out


class TestBilinearResize:
    def test_constant_stays_constant(self):
        out = bilinear_resize(Tensor(np.full((1, 1, 2, 2), 7.0)), 5, 9)
        np.testing.assert_allclose(out.data, np.full((1, 1, 5, 9), 7.0))

    def test_same_size_identity(self):
        x = rng.standard_normal((1, 2, 2, 2))
        out = bilinear_resize(Tensor(x), 2, 2)
        np.testing.assert_allclose(out.data, x)

    def test_2x2_to_4x4_bounded_monotone(self):
        x = np.array([[0.0, 1.0], [1.0, 2.0]]).reshape(1, 1, 2, 2)
        out = bilinear_resize(Tensor(x), 4, 4).data[0, 0]
        assert out.min() >= 0.0 and out.max() <= 2.0
        assert np.all(np.diff(out, axis=0) >= 0) and np.all(np.diff(out, axis=1) >= 0)

    def test_matches_bruteforce_oracle(self):
        x = rng.standard_normal((2, 3, 5, 4))
        out = bilinear_resize(Tensor(x), 9, 7)
        np.testing.assert_allclose(out.data, _bilinear_oracle(x, 9, 7), atol=1e-12)

    def test_gradcheck(self):
        res = gradcheck(lambda t: bilinear_resize(t, 6, 5).sum(),
                        [rng.standard_normal((1, 2, 3, 4))])
        assert res.ok(tol_fraction=1.0)


class TestBackward:
    def test_sum_grad_ones(self):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_zero_scaled_loss(self):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        backward((x * 0.0).sum())
        np.testing.assert_array_equal(x.grad, np.zeros((2, 2)))

    def test_composite_gradcheck(self):
        def f(x, w, b, wl, bl):
            h = relu(conv2d(x, w, b, stride=2, padding=1))
            return linear(global_avg_pool(h), wl, bl).sum()
        res = gradcheck(f, [rng.standard_normal((2, 3, 8, 8)),
                            rng.standard_normal((4, 3, 3, 3)),
                            rng.standard_normal(4),
                            rng.standard_normal((5, 4)),
                            rng.standard_normal(5)])
        assert res.ok(tol_fraction=1.0)

    def test_non_scalar_rejected(self):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with pytest.raises(UsageError):
            backward(relu(x))

    def test_double_backward_rejected(self):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        loss = relu(x).sum()
        backward(loss)
        with pytest.raises(UsageError):
            backward(loss)

    def test_grads_accumulate_across_backwards(self):
        x = Tensor(np.ones(3), requires_grad=True)
        backward(x.sum())
        backward(x.sum())    # fresh forward, same leaf
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            loss = x.sum()
        with pytest.raises(UsageError):
            backward(loss)


class TestStopGradient:
    def test_values_identical(self):
        x = Tensor(rng.standard_normal((3, 3)))
        np.testing.assert_array_equal(stop_gradient(x).data, x.data)

    def test_product_rule_with_detached_factor(self):
        x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        backward((stop_gradient(x) * x).sum())
        np.testing.assert_allclose(x.grad, x.data)

    def test_detached_sum_zero_grad(self):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        loss = stop_gradient(x).sum() + (x * 0.0).sum()    # keep a live path
        backward(loss)
        np.testing.assert_array_equal(x.grad, np.zeros(4))

    def test_ancestors_through_detach_get_zero(self):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        y = relu(x)
        loss = stop_gradient(y).sum() + y.sum()
        backward(loss)
        # only the live branch contributes
        np.testing.assert_allclose(x.grad, (x.data > 0).astype(float))


class TestAdamW:
    def test_zero_grad_zero_decay_unchanged(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_decay_only(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = AdamW([p], lr=1.0, weight_decay=0.01)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_allclose(p.data, [0.99, -1.98])

    def test_single_step_hand_value(self):
        # p=1, g=1, lr=0.1, betas (0.9, 0.999), eps 1e-8, no decay, step 1:
        # m_hat = 1, v_hat = 1 -> p = 1 - 0.1 / (1 + 1e-8)
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = np.array([1.0])
        opt.step()
        np.testing.assert_allclose(p.data, [0.9000000009], atol=1e-9)

    def test_nonpositive_lr_rejected(self):
        with pytest.raises(ConfigurationError):
            AdamW([Tensor(np.ones(1), requires_grad=True)], lr=0.0)


class TestFusedOps:
    def test_masked_ce_gradcheck(self):
        tgt = rng.integers(0, 5, (2, 6, 6))
        inc = rng.random((2, 6, 6)) > 0.4
        res = gradcheck(lambda lg: masked_softmax_ce(lg, tgt, inc),
                        [rng.standard_normal((2, 5, 6, 6))])
        assert res.ok(tol_fraction=1.0)

    def test_multilabel_gradcheck(self):
        y = (rng.random((3, 4)) > 0.5).astype(float)
        res = gradcheck(lambda z: multilabel_soft_margin(z, y),
                        [rng.standard_normal((3, 4))])
        assert res.ok(tol_fraction=1.0)

    def test_discrepancy_gradcheck(self):
        res = gradcheck(lambda a, b: neg_log_one_minus_cosine(a, b),
                        [rng.standard_normal((3, 12)), rng.standard_normal((3, 12))])
        assert res.ok(tol_fraction=1.0)


def test_dtype_follows_storage():
    x32 = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    out = relu(x32)
    assert out.dtype == np.float32
    backward(out.sum())
    assert x32.grad.dtype == np.float32
