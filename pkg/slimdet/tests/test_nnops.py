"""
Tests for the tensor kernels.
"""
import numpy as np
import pytest

from slimdet.domain.entities import Activation
from slimdet.domain.errors import ChannelMismatch, NegativeVariance
from slimdet.domain.nnops import (
    BnParams,
    activation,
    activation_backward,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    fold_batchnorm,
    maxpool_backward,
    maxpool_forward,
    route_concat,
    upsample_backward,
    upsample_forward,
)


def random_bn(rng, channels):
    return BnParams(
        gamma=rng.normal(size=channels),
        beta=rng.normal(size=channels),
        mean=rng.normal(size=channels),
        var=rng.uniform(0.5, 2.0, size=channels),
    )


class TestConvolution:
    def test_ones_kernel(self):
        out = conv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), pad=1)
        assert out.shape == (1, 3, 3)
        assert out[0, 1, 1] == 9
        assert out[0, 0, 0] == out[0, 0, 2] == out[0, 2, 0] == out[0, 2, 2] == 4
        assert out[0, 0, 1] == 6

    def test_no_kernel_flip(self):
        x = np.zeros((1, 3, 3))
        x[0, 1, 1] = 1.0
        kernel = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        out = conv2d_forward(x, kernel, pad=1)
        np.testing.assert_array_equal(out[0], kernel[0, 0, ::-1, ::-1])

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_gemm_and_threads_match_reference(self, stride, pad):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 4, 9, 9))
        kernel = rng.normal(size=(6, 4, 3, 3))
        ref = conv2d_forward(x, kernel, stride, pad)
        np.testing.assert_allclose(conv2d_forward(x, kernel, stride, pad, method="gemm"), ref)
        np.testing.assert_allclose(conv2d_forward(x, kernel, stride, pad, threads=4), ref)

    def test_channel_mismatch(self):
        with pytest.raises(ChannelMismatch):
            conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 4, 4))
        kernel = rng.normal(size=(3, 2, 3, 3))
        upstream = rng.normal(size=(3, 4, 4))

        def loss(xv, kv):
            return float(np.sum(conv2d_forward(xv, kv, 1, 1) * upstream))

        dx, dw = conv2d_backward(upstream, x, kernel, 1, 1)
        h = 1e-3
        for idx in [(0, 0, 0, 0), (2, 1, 1, 2), (1, 0, 2, 1)]:
            kp, km = kernel.copy(), kernel.copy()
            kp[idx] += h
            km[idx] -= h
            numeric = (loss(x, kp) - loss(x, km)) / (2 * h)
            assert abs(numeric - dw[idx]) <= 1e-4 * max(1.0, abs(numeric))
        for idx in [(0, 0, 0), (1, 3, 2)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            numeric = (loss(xp, kernel) - loss(xm, kernel)) / (2 * h)
            assert abs(numeric - dx[idx]) <= 1e-4 * max(1.0, abs(numeric))


class TestBatchNorm:
    def test_identity_parameters(self):
        x = np.random.default_rng(2).normal(size=(3, 4, 4))
        p = BnParams(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=1e-12)
        np.testing.assert_allclose(batchnorm_forward(x, p), x, atol=1e-9)

    def test_zero_gamma_is_exactly_zero(self):
        x = np.random.default_rng(3).normal(size=(2, 3, 4, 4)) * 1e3
        p = BnParams(np.zeros(3), np.zeros(3), np.ones(3), np.full(3, 2.0))
        out = batchnorm_forward(x, p)
        assert np.all(out == 0.0)

    def test_folding_matches_unfolded(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 3, 6, 6)).astype(np.float32)
        kernel = rng.normal(size=(5, 3, 3, 3)).astype(np.float32)
        p = random_bn(rng, 5)
        unfolded = batchnorm_forward(conv2d_forward(x, kernel, 1, 1), p)
        k2, b2 = fold_batchnorm(kernel, None, p)
        folded = conv2d_forward(x, k2, 1, 1) + b2.reshape(1, -1, 1, 1)
        assert np.max(np.abs(folded - unfolded)) < 1e-5 * max(1.0, np.max(np.abs(unfolded)))

    def test_gamma_gradient(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 4, 4))
        upstream = rng.normal(size=x.shape)
        p = BnParams(np.zeros(3), np.zeros(3), rng.normal(size=3), rng.uniform(0.5, 2, 3))
        _, dgamma, dbeta = batchnorm_backward(upstream, x, p)
        normalized = (x - p.mean.reshape(1, -1, 1, 1)) / np.sqrt(
            p.var.reshape(1, -1, 1, 1) + p.eps
        )
        np.testing.assert_allclose(dgamma, (normalized * upstream).sum(axis=(0, 2, 3)))
        np.testing.assert_allclose(dbeta, upstream.sum(axis=(0, 2, 3)))

    def test_negative_variance(self):
        with pytest.raises(NegativeVariance):
            BnParams(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, -0.5]))


class TestActivations:
    def test_mish_values(self):
        out = activation(np.array([0.0, 1.0]), Activation.MISH)
        assert out[0] == 0.0
        assert out[1] == pytest.approx(0.86509839, abs=1e-8)

    def test_leaky(self):
        out = activation(np.array([-2.0, 3.0]), Activation.LEAKY)
        np.testing.assert_allclose(out, [-0.2, 3.0])

    def test_sigmoid_is_stable(self):
        out = activation(np.array([-1000.0, 0.0, 1000.0]), Activation.SIGMOID)
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
        assert np.all(np.isfinite(out))

    @pytest.mark.parametrize("kind", list(Activation))
    def test_gradients(self, kind):
        x = np.linspace(-3, 3, 13) + 0.05
        h = 1e-6
        numeric = (activation(x + h, kind) - activation(x - h, kind)) / (2 * h)
        np.testing.assert_allclose(
            activation_backward(np.ones_like(x), x, kind), numeric, rtol=1e-5, atol=1e-7
        )


class TestResampling:
    def test_route_order(self):
        a = np.zeros((3, 2, 2))
        b = np.ones((5, 2, 2))
        out = route_concat([a, b])
        assert out.shape == (8, 2, 2)
        assert np.all(out[:3] == 0) and np.all(out[3:] == 1)

    def test_route_groups(self):
        x = np.arange(4, dtype=np.float64).reshape(4, 1, 1)
        np.testing.assert_array_equal(route_concat([x], groups=2, group_id=1).ravel(), [2, 3])

    def test_spp_pools_keep_size(self):
        x = np.random.default_rng(6).normal(size=(2, 13, 13))
        for size in (5, 9, 13):
            assert maxpool_forward(x, size, 1).shape == x.shape

    def test_strided_maxpool(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        np.testing.assert_array_equal(maxpool_forward(x, 2, 2)[0], [[5, 7], [13, 15]])

    def test_maxpool_backward_routes_to_winner(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        out, idx = maxpool_forward(x, 2, 2, return_indices=True)
        grad = maxpool_backward(np.ones_like(out), idx, x.shape, 2, 2)
        assert grad.sum() == 4
        assert grad[0, 1, 1] == grad[0, 3, 3] == 1

    def test_upsample(self):
        x = np.arange(4, dtype=np.float64).reshape(1, 2, 2)
        up = upsample_forward(x, 2)
        assert up.shape == (1, 4, 4)
        np.testing.assert_array_equal(upsample_backward(np.ones_like(up), 2), np.full(x.shape, 4))
