import numpy as np
import pytest

import volsr.nn.conv as conv_mod
from volsr.nn import (
    AutodiffError,
    Tensor,
    avgpool3d,
    backward,
    conv2d,
    conv3d,
    maxpool2d,
    mean_all,
    mul,
    sum_all,
    upsample_nearest3d,
)

from oracles import direct_conv, fd_gradient, max_grad_rel_err


def linear_probe_loss(out_builder, probe):
    """sum(out * probe): a smooth scalar with dense, nonzero gradients."""
    return sum_all(mul(out_builder(), Tensor(probe)))


class TestConvForward:
    @pytest.mark.parametrize(
        "stride,padding,xsp", [(1, 0, 5), (1, 1, 5), (2, 1, 5), (1, 2, 4)]
    )
    def test_conv3d_matches_direct_loops(self, rng, stride, padding, xsp):
        x = rng.normal(size=(2, 2, xsp, xsp, xsp))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=(3,))
        got = conv3d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
        want = direct_conv(x, w, b, stride, padding)
        assert got.shape == want.shape
        assert np.allclose(got, want, atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_conv2d_matches_direct_loops(self, rng, stride, padding):
        x = rng.normal(size=(2, 3, 7, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=(4,))
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
        want = direct_conv(x, w, b, stride, padding)
        assert np.allclose(got, want, atol=1e-12)

    def test_conv_without_bias(self, rng):
        x = rng.normal(size=(1, 2, 4, 4, 4))
        w = rng.normal(size=(2, 2, 3, 3, 3))
        got = conv3d(Tensor(x), Tensor(w), None, 1, 1).data
        assert np.allclose(got, direct_conv(x, w, None, 1, 1), atol=1e-12)

    def test_kernel_size_one(self, rng):
        x = rng.normal(size=(1, 3, 4, 4, 4))
        w = rng.normal(size=(2, 3, 1, 1, 1))
        b = rng.normal(size=(2,))
        got = conv3d(Tensor(x), Tensor(w), Tensor(b)).data
        want = np.tensordot(w[:, :, 0, 0, 0], x, axes=([1], [1])).transpose(1, 0, 2, 3, 4)
        assert np.allclose(got, want + b[None, :, None, None, None], atol=1e-12)

    def test_both_engines_agree(self, rng):
        # The GEMM lowering and the per-tap accumulation are alternate
        # routes; force the second by shrinking the buffer cap.
        x = rng.normal(size=(1, 2, 6, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=(3,))
        fast = conv3d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
        cap = conv_mod._MAX_COL_BYTES
        try:
            conv_mod._MAX_COL_BYTES = 0
            slow = conv3d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
        finally:
            conv_mod._MAX_COL_BYTES = cap
        assert np.allclose(fast, slow, rtol=1e-12, atol=1e-12)

    def test_geometry_validation(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 8, 8, 8)))
        w = Tensor(rng.normal(size=(1, 1, 3, 3, 3)))
        b = Tensor(np.zeros(1))
        with pytest.raises(AutodiffError):
            conv3d(x, w, b, stride=2, padding=1)  # (8+2-3)/2 is not integral
        with pytest.raises(AutodiffError):
            conv3d(x, Tensor(rng.normal(size=(1, 1, 4, 4, 4))), b)  # even kernel
        with pytest.raises(AutodiffError):
            conv3d(x, Tensor(rng.normal(size=(1, 2, 3, 3, 3))), b)  # channel mismatch
        with pytest.raises(AutodiffError):
            conv3d(x, w, Tensor(np.zeros(2)))  # bias length mismatch
        with pytest.raises(AutodiffError):
            conv2d(Tensor(rng.normal(size=(1, 1, 4, 4))), w, b)  # ndim mismatch


class TestConvGradients:
    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
    def test_conv3d_grads(self, rng, stride, padding):
        xsp = 5
        x = Tensor(rng.normal(size=(1, 2, xsp, xsp, xsp)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 2, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2,)), requires_grad=True)
        out_sp = (xsp + 2 * padding - 3) // stride + 1
        probe = rng.normal(size=(1, 2, out_sp, out_sp, out_sp))

        def loss():
            return linear_probe_loss(lambda: conv3d(x, w, b, stride, padding), probe)

        backward(loss())
        for leaf in (x, w, b):
            numeric = fd_gradient(lambda: loss().data, leaf.data, sample=20, rng=rng)
            assert max_grad_rel_err(leaf.grad, numeric) < 1e-4

    def test_conv2d_grads(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        probe = rng.normal(size=(2, 3, 5, 5))

        def loss():
            return linear_probe_loss(lambda: conv2d(x, w, b, 1, 1), probe)

        backward(loss())
        for leaf in (x, w, b):
            numeric = fd_gradient(lambda: loss().data, leaf.data, sample=20, rng=rng)
            assert max_grad_rel_err(leaf.grad, numeric) < 1e-4

    def test_strided_grad_x_scatters_correctly(self, rng):
        # stride 2 exercises the scatter path rather than the flipped conv.
        x = Tensor(rng.normal(size=(1, 1, 5, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(1, 1, 3, 3, 3)))
        probe = rng.normal(size=(1, 1, 2, 2, 2))

        def loss():
            return linear_probe_loss(lambda: conv3d(x, w, None, 2, 0), probe)

        backward(loss())
        numeric = fd_gradient(lambda: loss().data, x.data)
        assert max_grad_rel_err(x.grad, numeric) < 1e-4


class TestPoolsAndUpsample:
    def test_maxpool_values_and_ties(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = maxpool2d(Tensor(x), 2).data
        assert np.array_equal(out[0, 0], np.array([[5.0, 7.0], [13.0, 15.0]]))

        tied = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        backward(sum_all(maxpool2d(tied, 2)))
        # Gradient goes to exactly one voxel per window.
        assert tied.grad.sum() == 1.0
        assert (tied.grad >= 0).all()

    def test_maxpool_drops_ragged_edges(self, rng):
        x = rng.normal(size=(1, 1, 5, 5))
        out = maxpool2d(Tensor(x), 2).data
        assert out.shape == (1, 1, 2, 2)
        assert out[0, 0, 0, 0] == x[0, 0, :2, :2].max()

    def test_maxpool_grad(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        probe = rng.normal(size=(1, 2, 2, 2))

        def loss():
            return linear_probe_loss(lambda: maxpool2d(x, 2), probe)

        backward(loss())
        numeric = fd_gradient(lambda: loss().data, x.data)
        assert max_grad_rel_err(x.grad, numeric) < 1e-4

    def test_avgpool_values(self):
        x = np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2)
        out = avgpool3d(Tensor(x), 2).data
        assert out.shape == (1, 1, 1, 1, 1)
        assert out[0, 0, 0, 0, 0] == x.mean()

    def test_avgpool_requires_divisibility(self, rng):
        with pytest.raises(AutodiffError):
            avgpool3d(Tensor(rng.normal(size=(1, 1, 5, 4, 4))), 2)

    def test_avgpool_grad(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 4, 4, 4)), requires_grad=True)
        probe = rng.normal(size=(1, 1, 2, 2, 2))

        def loss():
            return linear_probe_loss(lambda: avgpool3d(x, 2), probe)

        backward(loss())
        numeric = fd_gradient(lambda: loss().data, x.data)
        assert max_grad_rel_err(x.grad, numeric) < 1e-4

    def test_upsample_values(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2)
        out = upsample_nearest3d(Tensor(x), 2).data
        assert out.shape == (1, 1, 2, 4, 4)
        assert np.array_equal(out[0, 0, 0, :2, :2], np.ones((2, 2)))
        assert np.array_equal(out[0, 0, 1], out[0, 0, 0])

    def test_upsample_grad_sums_replicas(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2, 2)), requires_grad=True)
        probe = rng.normal(size=(1, 1, 4, 4, 4))

        def loss():
            return linear_probe_loss(lambda: upsample_nearest3d(x, 2), probe)

        backward(loss())
        numeric = fd_gradient(lambda: loss().data, x.data)
        assert max_grad_rel_err(x.grad, numeric) < 1e-4

    def test_upsample_factor_one_is_identity(self, rng):
        x = rng.normal(size=(1, 1, 3, 3, 3))
        assert np.array_equal(upsample_nearest3d(Tensor(x), 1).data, x)
