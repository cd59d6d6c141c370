"""Tests for the convolutional branch blocks."""

import numpy as np
import pytest

from floodcast import autodiff as ad
from floodcast import fcn
from floodcast.autodiff import BatchNormState, Node, Rng
from floodcast.errors import ConfigurationError, DimensionError


class TestConvBlock:
    def test_zero_kernels_give_zero_output(self):
        rng = Rng(1)
        params = fcn.init_conv_block(3, 4, 3, rng)
        params.kernels.data[...] = 0.0
        params.bias.data[...] = 0.0
        out = fcn.conv_block(params, Node(rng.normal((2, 3, 8))), "train")
        assert np.allclose(out.data, 0.0, atol=1e-15)

    def test_identity_kernel_infer_is_relu(self):
        params = fcn.init_conv_block(1, 1, 1, Rng(2))
        params.kernels.data[...] = 1.0
        params.bias.data[...] = 0.0
        # running stats (0, 1) leave the values scaled by 1/sqrt(1 + eps)
        x = np.array([[[1.0, -2.0, 3.0, -0.5]]])
        out = fcn.conv_block(params, Node(x), "infer")
        expected = np.maximum(x, 0.0) / np.sqrt(1.0 + fcn.BN_EPSILON)
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_gradcheck_full_block(self):
        rng = Rng(3)
        params = fcn.init_conv_block(3, 4, 3, rng)
        x = Node(rng.normal((2, 3, 8)))
        coef = rng.normal((2, 4, 8))

        def f():
            params.bn_state = BatchNormState.initial(4)
            return ad.sum_all(ad.mul_const(fcn.conv_block(params, x, "train"), coef))

        err = ad.grad_check(f, [x, *params.trainable()], 1e-5)
        assert err < 1e-4

    def test_time_length_preserved(self):
        rng = Rng(4)
        x = Node(rng.normal((2, 9, 96)))
        for c_in, c_out, k in ((9, 16, 9), (16, 32, 5), (32, 16, 3)):
            block = fcn.init_conv_block(c_in, c_out, k, rng)
            x = fcn.conv_block(block, x, "train")
            assert x.shape[2] == 96
        assert fcn.global_avg_pool(x).shape == (2, 16)

    def test_default_branch_output_shape(self):
        # default stack 128/256/128 pools to (B, 128)
        rng = Rng(20)
        x = Node(rng.normal((2, 9, 96)))
        for c_in, c_out, k in ((9, 128, 9), (128, 256, 5), (256, 128, 3)):
            x = fcn.conv_block(fcn.init_conv_block(c_in, c_out, k, rng), x, "infer")
            assert x.shape[2] == 96
        assert fcn.global_avg_pool(x).shape == (2, 128)

    def test_infer_deterministic(self):
        rng = Rng(5)
        params = fcn.init_conv_block(2, 3, 3, rng)
        x = Node(rng.normal((1, 2, 10)))
        a = fcn.conv_block(params, x, "infer").data
        b = fcn.conv_block(params, x, "infer").data
        assert np.array_equal(a, b)


class TestGlobalAvgPool:
    def test_constant_channel(self):
        out = fcn.global_avg_pool(Node(np.full((2, 3, 7), 4.5)))
        assert np.allclose(out.data, 4.5, atol=1e-15)

    def test_arithmetic_mean(self):
        out = fcn.global_avg_pool(Node(np.array([[[1.0, 2.0, 3.0, 4.0]]])))
        assert out.data[0, 0] == pytest.approx(2.5)

    def test_algebraic_identity(self):
        rng = Rng(6)
        x = rng.normal((3, 4, 11))
        out = fcn.global_avg_pool(Node(x))
        assert np.max(np.abs(out.data * 11 - x.sum(axis=2))) < 1e-12

    def test_empty_time_axis_rejected(self):
        with pytest.raises(DimensionError):
            fcn.global_avg_pool(Node(np.zeros((2, 3, 0))))


class TestDropout:
    def test_infer_is_identity(self):
        x = Node(Rng(7).normal((4, 5)))
        assert fcn.dropout(x, 0.5, "infer") is x

    def test_rate_zero_is_identity(self):
        x = Node(Rng(8).normal((4, 5)))
        assert fcn.dropout(x, 0.0, "train", Rng(9)) is x

    def test_train_statistics(self):
        x = Node(np.ones(1_000_000))
        out = fcn.dropout(x, 0.5, "train", Rng(10))
        zero_fraction = np.mean(out.data == 0.0)
        assert 0.497 <= zero_fraction <= 0.503
        assert 0.99 <= out.data.mean() <= 1.01
        # inverted dropout scales survivors by 1/(1-rate)
        assert set(np.unique(out.data)) == {0.0, 2.0}

    def test_backward_uses_same_mask(self):
        x = Node(np.ones((3, 3)))
        out = fcn.dropout(x, 0.5, "train", Rng(11))
        ad.backward(ad.sum_all(out))
        assert np.array_equal(x.grad, out.data)

    def test_rate_validation(self):
        x = Node(np.ones(3))
        for bad in (-0.1, 1.0, 1.5):
            with pytest.raises(ConfigurationError):
                fcn.dropout(x, bad, "train", Rng(12))

    def test_train_without_rng_rejected(self):
        with pytest.raises(ConfigurationError):
            fcn.dropout(Node(np.ones(3)), 0.5, "train")
