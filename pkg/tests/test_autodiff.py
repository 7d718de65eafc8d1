"""Semantics and gradients of the tensor engine."""

import numpy as np
import pytest

from dceseg.autodiff import (
    BatchNormState,
    GraphConsumedError,
    Tensor,
    backward,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv_transpose2d,
    maxpool2x2,
    relu,
    slice_channels,
    softmax_channels,
)
from oracles import direct_conv2d, direct_conv_transpose2d, max_rel_error, numerical_gradient


def scalar_loss_grad(build_loss, *arrays, h=1e-4):
    """Analytic and numeric gradients of a scalar graph w.r.t. each array."""
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = build_loss(*tensors)
    backward(loss)
    analytic = [t.grad.copy() for t in tensors]
    numeric = []
    for a in arrays:
        numeric.append(numerical_gradient(
            lambda: build_loss(*[Tensor(x, dtype=np.float64) for x in arrays]).item(),
            a, h=h))
    return analytic, numeric


def pick(y: Tensor, index) -> Tensor:
    onehot = np.zeros(y.shape)
    onehot[index] = 1.0
    return (y * Tensor(onehot.astype(y.dtype))).sum()


class TestConv2d:
    def test_ones_kernel_on_constant_image(self):
        x = Tensor(np.ones((1, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        y = conv2d(x, w, b, dilation=1)
        assert y.data[0, 0, 2, 2] == 9.0
        assert y.data[0, 0, 0, 0] == 4.0

    def test_identity_kernel_is_bit_exact_identity(self, rng):
        x = rng.normal(size=(2, 3, 7, 7)).astype(np.float32)
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        y = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)), dilation=1)
        assert np.array_equal(y.data, x)

    def test_dilated_impulse_response(self):
        x = np.zeros((1, 1, 9, 9), dtype=np.float32)
        x[0, 0, 4, 4] = 1.0
        y = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)),
                   dilation=2)
        expected = {(4 + dz, 4 + dx) for dz in (-2, 0, 2) for dx in (-2, 0, 2)}
        nonzero = set(map(tuple, np.argwhere(y.data[0, 0] != 0)))
        assert nonzero == expected
        oracle = direct_conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1), dilation=2)
        np.testing.assert_allclose(y.data, oracle, rtol=1e-6)

    @pytest.mark.parametrize("dilation", [1, 2, 4])
    @pytest.mark.parametrize("ksize", [1, 3])
    def test_matches_direct_convolution(self, rng, dilation, ksize):
        if ksize == 1 and dilation > 1:
            pytest.skip("1x1 kernels ignore dilation")
        x = rng.normal(size=(2, 3, 10, 11))
        w = rng.normal(size=(4, 3, ksize, ksize))
        b = rng.normal(size=4)
        y = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                   Tensor(b, dtype=np.float64), dilation=dilation)
        np.testing.assert_allclose(y.data, direct_conv2d(x, w, b, dilation), rtol=1e-10)

    def test_gradient_footprint_matches_dilation(self, rng):
        for dilation in (1, 2, 4):
            x = Tensor(rng.normal(size=(1, 1, 21, 21)), requires_grad=True,
                       dtype=np.float64)
            w = Tensor(np.ones((1, 1, 3, 3)), dtype=np.float64, requires_grad=True)
            y = conv2d(x, w, Tensor(np.zeros(1), dtype=np.float64), dilation=dilation)
            backward(pick(y, (0, 0, 10, 10)))
            footprint = np.argwhere(x.grad[0, 0] != 0)
            lo, hi = footprint.min(axis=0), footprint.max(axis=0)
            assert tuple(hi - lo + 1) == (2 * dilation + 1, 2 * dilation + 1)

    def test_rejects_bad_arguments(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 8, 8)))
        b = Tensor(np.zeros(4))
        with pytest.raises(ValueError, match="channels"):
            conv2d(x, Tensor(rng.normal(size=(4, 2, 3, 3))), b)
        with pytest.raises(ValueError, match="dilation"):
            conv2d(x, Tensor(rng.normal(size=(4, 3, 3, 3))), b, dilation=0)
        with pytest.raises(ValueError, match="kernel"):
            conv2d(x, Tensor(rng.normal(size=(4, 3, 2, 2))), b)

    def test_non_finite_output_raises(self):
        x = Tensor(np.full((1, 1, 4, 4), np.inf, dtype=np.float32))
        with pytest.raises(FloatingPointError):
            conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))

    def test_forward_is_deterministic(self, rng):
        x = rng.normal(size=(1, 4, 16, 16)).astype(np.float32)
        w = rng.normal(size=(8, 4, 3, 3)).astype(np.float32)
        b = rng.normal(size=8).astype(np.float32)
        first = conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=2).data
        second = conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=2).data
        assert np.array_equal(first, second)


class TestConvTranspose2d:
    def test_single_pixel_broadcast(self):
        y = conv_transpose2d(Tensor(np.full((1, 1, 1, 1), 3.0)),
                             Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 3.0))

    def test_zero_input_gives_zero_output(self, rng):
        y = conv_transpose2d(Tensor(np.zeros((1, 3, 4, 4))),
                             Tensor(rng.normal(size=(3, 2, 2, 2))), Tensor(np.zeros(2)))
        assert not y.data.any()
        assert y.shape == (1, 2, 8, 8)

    def test_matches_direct_oracle(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        w = rng.normal(size=(3, 2, 2, 2))
        b = rng.normal(size=2)
        y = conv_transpose2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                             Tensor(b, dtype=np.float64))
        np.testing.assert_allclose(y.data, direct_conv_transpose2d(x, w, b), rtol=1e-10)

    def test_grad_of_sum_is_kernel_sum(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        w = rng.normal(size=(2, 3, 2, 2))

        def build(xt, wt):
            return conv_transpose2d(xt, wt, Tensor(np.zeros(3), dtype=np.float64)).sum()

        (gx, gw), (nx, nw) = scalar_loss_grad(build, x, w)
        per_channel = w.sum(axis=(1, 2, 3))
        np.testing.assert_allclose(gx, np.broadcast_to(per_channel[None, :, None, None],
                                                       x.shape), rtol=1e-9)
        assert max_rel_error(gx, nx) < 1e-4
        assert max_rel_error(gw, nw) < 1e-4

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channels"):
            conv_transpose2d(Tensor(rng.normal(size=(1, 3, 4, 4))),
                             Tensor(rng.normal(size=(2, 2, 2, 2))), Tensor(np.zeros(2)))


class TestMaxPool:
    def test_simple_window(self):
        y = maxpool2x2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert y.data.reshape(()) == 4.0

    def test_constant_image(self):
        y = maxpool2x2(Tensor(np.full((1, 2, 6, 6), 2.5)))
        np.testing.assert_array_equal(y.data, np.full((1, 2, 3, 3), 2.5))

    def test_tie_breaks_to_first_in_row_major_order(self):
        x = Tensor(np.array([[[[5.0, 5.0], [1.0, 1.0]]]]), requires_grad=True)
        y = maxpool2x2(x)
        backward(y.sum())
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_odd_dims_rejected(self, rng):
        with pytest.raises(ValueError, match="even"):
            maxpool2x2(Tensor(rng.normal(size=(1, 1, 5, 4))))


class TestBatchNorm:
    def test_constant_channel_maps_to_zero(self):
        state = BatchNormState(1)
        y = batchnorm2d(Tensor(np.full((1, 1, 4, 4), 7.0)), Tensor(np.ones(1)),
                        Tensor(np.zeros(1)), state, training=True)
        np.testing.assert_array_equal(y.data, np.zeros((1, 1, 4, 4)))

    def test_symmetric_values_normalize_to_unit(self):
        x = np.zeros((1, 1, 2, 2), dtype=np.float32)
        x[0, 0] = [[-1.0, 1.0], [-1.0, 1.0]]
        y = batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                        BatchNormState(1), training=True)
        np.testing.assert_allclose(np.abs(y.data), 1.0, atol=1e-3)

    def test_affine_shift_and_scale(self, rng):
        x = rng.normal(size=(2, 1, 8, 8)).astype(np.float32)
        x = (x - x.mean()) / x.std()
        y = batchnorm2d(Tensor(x), Tensor(np.full(1, 2.0)), Tensor(np.full(1, 5.0)),
                        BatchNormState(1), training=True)
        assert abs(y.data.mean() - 5.0) < 1e-3
        assert abs(y.data.std() - 2.0) < 1e-3

    def test_eval_before_training_is_an_error(self, rng):
        with pytest.raises(RuntimeError, match="eval"):
            batchnorm2d(Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(np.ones(2)),
                        Tensor(np.zeros(2)), BatchNormState(2), training=False)

    def test_running_stats_blend_toward_batch(self, rng):
        state = BatchNormState(1)
        x = rng.normal(loc=3.0, size=(1, 1, 16, 16)).astype(np.float32)
        batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state,
                    training=True)
        assert state.updates == 1
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(), rtol=1e-5)
        np.testing.assert_allclose(state.running_var,
                                   0.9 * 1.0 + 0.1 * x.var(), rtol=1e-5)

    def test_eval_uses_running_stats(self, rng):
        state = BatchNormState(1)
        state.running_mean[:] = 2.0
        state.running_var[:] = 4.0
        state.updates = 1
        x = rng.normal(size=(1, 1, 4, 4)).astype(np.float32)
        y = batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state,
                        training=False)
        np.testing.assert_allclose(y.data, (x - 2.0) / np.sqrt(4.0 + 1e-5), rtol=1e-6)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="gamma"):
            batchnorm2d(Tensor(rng.normal(size=(1, 3, 4, 4))), Tensor(np.ones(2)),
                        Tensor(np.zeros(2)), BatchNormState(2), training=True)


class TestChannelOps:
    def test_relu(self):
        y = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])

    def test_softmax_equal_logits(self):
        y = softmax_channels(Tensor(np.zeros((1, 2, 3, 3))))
        np.testing.assert_allclose(y.data, 0.5)

    def test_softmax_closed_form(self):
        x = np.zeros((1, 2, 1, 1), dtype=np.float64)
        x[0, 1] = np.log(3.0)
        y = softmax_channels(Tensor(x, dtype=np.float64))
        np.testing.assert_allclose(y.data[0, :, 0, 0], [0.25, 0.75], rtol=1e-12)

    def test_softmax_sums_to_one_and_in_range(self, rng):
        y = softmax_channels(Tensor(rng.normal(scale=10, size=(2, 2, 8, 8))))
        assert np.abs(y.data.sum(axis=1) - 1.0).max() < 1e-6
        assert y.data.min() >= 0.0 and y.data.max() <= 1.0

    def test_concat_preserves_order_and_splits_grads(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True, dtype=np.float64)
        y = concat_channels([a, b])
        np.testing.assert_array_equal(y.data[:, :2], a.data)
        np.testing.assert_array_equal(y.data[:, 2:], b.data)
        backward(pick(y, (0, 3, 1, 1)))
        assert not a.grad.any()
        assert b.grad[0, 1, 1, 1] == 1.0 and b.grad.sum() == 1.0

    def test_concat_shape_mismatch(self, rng):
        with pytest.raises(ValueError, match="incompatible"):
            concat_channels([Tensor(rng.normal(size=(1, 2, 4, 4))),
                             Tensor(rng.normal(size=(1, 2, 5, 4)))])

    def test_slice_channels_roundtrip(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 3, 3)), requires_grad=True, dtype=np.float64)
        y = slice_channels(x, 1, 3)
        np.testing.assert_array_equal(y.data, x.data[:, 1:3])
        backward(y.sum())
        np.testing.assert_array_equal(x.grad[:, 1:3], np.ones((1, 2, 3, 3)))
        assert not x.grad[:, [0, 3]].any()


class TestBackward:
    def test_linear_loss_gradient(self, rng):
        x_val = rng.normal(size=(3, 4)).astype(np.float32)
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        loss = (w * Tensor(x_val)).sum()
        backward(loss)
        np.testing.assert_allclose(w.grad, x_val, rtol=1e-6)

    def test_backward_twice_raises(self, rng):
        w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        loss = (w * w).sum()
        backward(loss)
        with pytest.raises(GraphConsumedError):
            backward(loss)

    def test_backward_on_consumed_subgraph_raises(self, rng):
        w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        h = w * w
        backward(h.sum())
        loss2 = (h * Tensor(np.ones((2, 2)))).sum()
        with pytest.raises(GraphConsumedError):
            backward(loss2)

    def test_non_scalar_loss_rejected(self, rng):
        w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(w * w)

    def test_gradients_accumulate_across_uses(self, rng):
        w = Tensor(np.full((2, 2), 3.0), requires_grad=True)
        loss = (w * w).sum() + w.sum()
        backward(loss)
        np.testing.assert_allclose(w.grad, 2.0 * 3.0 + 1.0)


class TestFiniteDifferences:
    """Analytic gradients vs central differences (double precision, h=1e-4)."""

    def test_conv2d(self, rng):
        for dilation in (1, 2):
            x = rng.normal(size=(2, 2, 7, 7))
            w = rng.normal(size=(3, 2, 3, 3))
            b = rng.normal(size=3)
            mask = Tensor(rng.normal(size=(2, 3, 7, 7)))

            def build(xt, wt, bt):
                return (conv2d(xt, wt, bt, dilation) * mask).sum()

            analytic, numeric = scalar_loss_grad(build, x, w, b)
            for a, n in zip(analytic, numeric):
                assert max_rel_error(a, n) < 1e-4

    def test_conv_transpose2d(self, rng):
        x = rng.normal(size=(1, 3, 4, 5))
        w = rng.normal(size=(3, 2, 2, 2))
        b = rng.normal(size=2)
        mask = Tensor(rng.normal(size=(1, 2, 8, 10)))

        def build(xt, wt, bt):
            return (conv_transpose2d(xt, wt, bt) * mask).sum()

        analytic, numeric = scalar_loss_grad(build, x, w, b)
        for a, n in zip(analytic, numeric):
            assert max_rel_error(a, n) < 1e-4

    def test_maxpool(self, rng):
        x = rng.normal(size=(2, 2, 6, 6))
        mask = Tensor(rng.normal(size=(2, 2, 3, 3)))

        def build(xt):
            return (maxpool2x2(xt) * mask).sum()

        (analytic,), (numeric,) = scalar_loss_grad(build, x)
        assert max_rel_error(analytic, numeric) < 1e-4

    def test_batchnorm_train_mode(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        gamma = rng.normal(size=3)
        beta = rng.normal(size=3)
        mask = Tensor(rng.normal(size=(2, 3, 4, 4)))

        def build(xt, gt, bt):
            return (batchnorm2d(xt, gt, bt, BatchNormState(3, dtype=np.float64),
                                training=True) * mask).sum()

        analytic, numeric = scalar_loss_grad(build, x, gamma, beta)
        for a, n in zip(analytic, numeric):
            assert max_rel_error(a, n) < 1e-4

    def test_softmax_and_relu(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        mask = Tensor(rng.normal(size=(1, 2, 5, 5)))

        def build(xt):
            return (softmax_channels(relu(xt)) * mask).sum()

        (analytic,), (numeric,) = scalar_loss_grad(build, x)
        assert max_rel_error(analytic, numeric) < 1e-4
