import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from volsr.nn import (
    AutodiffError,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    concat_channels,
    grad_enabled,
    leaky_relu,
    mean_all,
    moveaxis,
    mul,
    neg,
    no_grad,
    reshape,
    sigmoid,
    slice_axis,
    softplus,
    sub,
    sum_all,
)

from oracles import fd_gradient, max_grad_rel_err

finite_arrays = arrays(
    np.float64,
    st.tuples(st.integers(1, 4), st.integers(1, 4)),
    elements=st.floats(-10, 10, allow_nan=False),
)


def check_fd(build_loss, leaf, tol=1e-4):
    loss = build_loss()
    backward(loss)
    numeric = fd_gradient(lambda: build_loss().data, leaf.data)
    assert max_grad_rel_err(leaf.grad, numeric) < tol


class TestForwardValues:
    def test_add_sub_mul_match_numpy(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        assert np.array_equal(add(Tensor(a), Tensor(b)).data, a + b)
        assert np.array_equal(sub(Tensor(a), Tensor(b)).data, a - b)
        assert np.array_equal(mul(Tensor(a), Tensor(b)).data, a * b)

    def test_scalar_folding(self, rng):
        a = rng.normal(size=(3,))
        assert np.array_equal((Tensor(a) + 2.0).data, a + 2.0)
        assert np.array_equal((3.0 - Tensor(a)).data, 3.0 - a)
        assert np.array_equal((Tensor(a) * -1.5).data, a * -1.5)

    def test_shape_mismatch_raises(self):
        with pytest.raises(AutodiffError):
            add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
        with pytest.raises(AutodiffError):
            mul(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))

    def test_unary_ops_match_numpy(self, rng):
        a = rng.normal(size=(2, 5))
        assert np.array_equal(neg(Tensor(a)).data, -a)
        assert np.array_equal(absolute(Tensor(a)).data, np.abs(a))
        assert np.allclose(sum_all(Tensor(a)).data, a.sum())
        assert np.allclose(mean_all(Tensor(a)).data, a.mean())

    def test_leaky_relu_values(self):
        a = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        out = leaky_relu(Tensor(a), slope=0.2).data
        assert np.array_equal(out, np.array([-0.4, -0.1, 0.0, 0.5, 2.0]))

    def test_sigmoid_extremes_are_stable(self):
        out = sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
        assert out[0] == 0.0
        assert out[1] == 0.5
        assert out[2] == 1.0

    def test_softplus_matches_logaddexp(self, rng):
        a = rng.normal(size=(7,)) * 10
        assert np.array_equal(softplus(Tensor(a)).data, np.logaddexp(0.0, a))

    def test_softplus_large_negative_does_not_underflow_to_nan(self):
        out = softplus(Tensor(np.array([-1e4, 1e4]))).data
        assert np.isfinite(out).all()
        assert out[1] == pytest.approx(1e4)

    def test_structural_ops(self, rng):
        a = rng.normal(size=(2, 3, 4))
        assert np.array_equal(reshape(Tensor(a), (6, 4)).data, a.reshape(6, 4))
        assert np.array_equal(moveaxis(Tensor(a), 2, 0).data, np.moveaxis(a, 2, 0))
        assert np.array_equal(
            slice_axis(Tensor(a), 1, step=2).data, a[:, ::2]
        )
        parts = [rng.normal(size=(2, c, 3)) for c in (1, 2, 3)]
        cat = concat_channels([Tensor(p) for p in parts])
        assert np.array_equal(cat.data, np.concatenate(parts, axis=1))

    def test_concat_rejects_mismatched_spatial(self):
        with pytest.raises(AutodiffError):
            concat_channels([Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 2, 4)))])

    @given(finite_arrays, finite_arrays)
    def test_add_commutes(self, a, b):
        if a.shape != b.shape:
            return
        assert np.array_equal(add(Tensor(a), Tensor(b)).data, add(Tensor(b), Tensor(a)).data)

    @given(finite_arrays)
    def test_abs_is_nonnegative_and_idempotent(self, a):
        t = absolute(Tensor(a))
        assert (t.data >= 0).all()
        assert np.array_equal(absolute(t).data, t.data)


class TestGradients:
    def test_add_mul_chain(self, rng):
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        check_fd(lambda: sum_all(mul(add(a, b), b)), a)

    def test_sub_neg(self, rng):
        a = Tensor(rng.normal(size=(4,)), requires_grad=True)
        b = Tensor(rng.normal(size=(4,)), requires_grad=True)
        check_fd(lambda: sum_all(sub(neg(a), b)), a)

    def test_absolute_away_from_zero(self, rng):
        a = Tensor(rng.normal(size=(5,)) + np.sign(rng.normal(size=(5,))) * 2, requires_grad=True)
        check_fd(lambda: sum_all(absolute(a)), a)

    def test_mean_all(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        check_fd(lambda: mean_all(mul(a, a)), a)

    def test_reshape_moveaxis_slice_concat(self, rng):
        a = Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)

        def loss():
            x = reshape(a, (2, 6))
            x = mul(x, x)
            return sum_all(x)

        check_fd(loss, a)

        b = Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
        check_fd(lambda: sum_all(mul(moveaxis(b, 0, 2), moveaxis(b, 0, 2))), b)

        c = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        check_fd(lambda: sum_all(mul(slice_axis(c, 1, step=2), slice_axis(c, 1, step=2))), c)

        d = Tensor(rng.normal(size=(1, 2, 3)), requires_grad=True)
        check_fd(lambda: sum_all(mul(concat_channels([d, d]), concat_channels([d, d]))), d)

    def test_activations(self, rng):
        # Inputs bounded away from the leaky-relu kink.
        raw = rng.normal(size=(6,))
        raw = np.where(np.abs(raw) < 0.2, 0.5, raw)
        a = Tensor(raw, requires_grad=True)
        check_fd(lambda: sum_all(leaky_relu(a)), a)
        b = Tensor(rng.normal(size=(6,)), requires_grad=True)
        check_fd(lambda: sum_all(sigmoid(b)), b)
        c = Tensor(rng.normal(size=(6,)), requires_grad=True)
        check_fd(lambda: sum_all(softplus(c)), c)

    def test_leaky_relu_derivative_at_zero_is_slope(self):
        a = Tensor(np.zeros(3), requires_grad=True)
        backward(sum_all(leaky_relu(a, slope=0.2)))
        assert np.array_equal(a.grad, np.full(3, 0.2))

    def test_diamond_graph_accumulates_once_per_path(self):
        # loss = sum((a + a) * a) = 2 * sum(a^2), so dloss/da = 4a.
        a = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        backward(sum_all(mul(add(a, a), a)))
        assert np.allclose(a.grad, 4 * a.data)

    def test_deep_chain_does_not_recurse(self):
        a = Tensor(np.ones(2), requires_grad=True)
        x = a
        for _ in range(5000):
            x = add(x, 0.0)
        backward(sum_all(x))
        assert np.array_equal(a.grad, np.ones(2))

    def test_grad_accumulates_across_backward_calls(self):
        a = Tensor(np.ones(3), requires_grad=True)
        backward(sum_all(a))
        backward(sum_all(a))
        assert np.array_equal(a.grad, np.full(3, 2.0))
        a.zero_grad()
        assert np.array_equal(a.grad, np.zeros(3))


class TestGraphModes:
    def test_no_grad_suppresses_tape(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            assert not grad_enabled()
            out = add(a, a)
        assert out.tape_node is None
        assert not out.requires_grad
        assert grad_enabled()

    def test_detach_breaks_the_graph(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = add(a, a).detach()
        c = mul(b, b)
        assert not c.requires_grad

    def test_backward_requires_scalar(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(AutodiffError):
            backward(add(a, a))

    def test_backward_requires_grad(self):
        with pytest.raises(AutodiffError):
            backward(sum_all(Tensor(np.ones(3))))

    def test_item_requires_single_element(self):
        assert Tensor(np.array([2.5])).item() == 2.5
        with pytest.raises(AutodiffError):
            Tensor(np.ones(3)).item()

    def test_as_tensor_passthrough(self):
        t = Tensor(np.ones(2))
        assert as_tensor(t) is t
        assert isinstance(as_tensor([1.0, 2.0]), Tensor)
