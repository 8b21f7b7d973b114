"""Autodiff engine: op semantics, gradients vs finite differences, tape
behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshpdm.errors import NumericError
from meshpdm.tensor import (Tensor, backward, concat, gather, leaky_relu, matmul, no_grad,
                            zero_grads)
from oracles import finite_difference_grads, rel_err


def test_matmul_identity():
    a = np.arange(9, dtype=float).reshape(3, 3)
    out = matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_computed():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_closed_form_and_fd():
    rng = np.random.default_rng(3)
    a = Tensor(rng.uniform(-1, 1, (5, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
    backward(matmul(a, b).sum())
    # d sum(a@b) / da = ones(5,3) @ b^T
    np.testing.assert_allclose(a.grad, np.ones((5, 3)) @ b.data.T, rtol=0, atol=1e-12)

    def f(a_data, b_data):
        return float((a_data @ b_data).sum())

    fd_a, fd_b = finite_difference_grads(f, [a.data, b.data])
    assert rel_err(a.grad, fd_a) <= 1e-6
    assert rel_err(b.grad, fd_b) <= 1e-6


@pytest.mark.parametrize("x,slope,expected", [(3.0, 0.2, 3.0), (-1.0, 0.2, -0.2)])
def test_leaky_relu_values(x, slope, expected):
    assert leaky_relu(Tensor([x]), slope).data[0] == pytest.approx(expected)


def test_leaky_relu_gradient_negative_side():
    x = Tensor([-2.0], requires_grad=True)
    backward(leaky_relu(x, 0.2).sum())
    assert x.grad[0] == pytest.approx(0.2)


def test_leaky_relu_subgradient_at_zero_is_slope():
    x = Tensor([0.0], requires_grad=True)
    backward(leaky_relu(x, 0.2).sum())
    assert x.grad[0] == pytest.approx(0.2)


def test_reduce_max_over_set():
    x = Tensor([[1.0, 5.0], [3.0, 2.0]])
    np.testing.assert_array_equal(x.max(axis=0).data, [3.0, 5.0])


def test_reduce_max_single_row_identity():
    x = Tensor([[4.0, -1.0, 7.0]])
    np.testing.assert_array_equal(x.max(axis=0).data, [4.0, -1.0, 7.0])


def test_reduce_mean_over_set():
    x = Tensor([[1.0, 5.0], [3.0, 1.0]])
    np.testing.assert_array_equal(x.mean(axis=0).data, [2.0, 3.0])


@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_set_reductions_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (7, 4))
    perm = rng.permutation(7)
    np.testing.assert_array_equal(Tensor(x).max(axis=0).data, Tensor(x[perm]).max(axis=0).data)
    np.testing.assert_allclose(Tensor(x).mean(axis=0).data, Tensor(x[perm]).mean(axis=0).data,
                               rtol=0, atol=1e-12)


def test_max_gradient_ties_to_lowest_index():
    x = Tensor([[2.0], [2.0], [1.0]], requires_grad=True)
    backward(x.max(axis=0).sum())
    np.testing.assert_array_equal(x.grad, [[1.0], [0.0], [0.0]])


def test_mean_gradient_uniform():
    x = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
    backward(x.mean(axis=0).sum())
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 0.5))


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(4, dtype=float), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_backward_chain_rule_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_backward_accumulates_and_zeroing_restores():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    first = x.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * first)
    zero_grads([x])
    backward(loss)
    np.testing.assert_array_equal(x.grad, first)


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, (4, 3))
    w1 = Tensor(rng.uniform(-1, 1, (3, 5)), requires_grad=True)
    b1 = Tensor(rng.uniform(-1, 1, 5), requires_grad=True)
    w2 = Tensor(rng.uniform(-1, 1, (5, 2)), requires_grad=True)
    b2 = Tensor(rng.uniform(-1, 1, 2), requires_grad=True)

    def loss_value(w1d, b1d, w2d, b2d):
        h = np.where(x @ w1d + b1d > 0, x @ w1d + b1d, 0.2 * (x @ w1d + b1d))
        out = h @ w2d + b2d
        return float((out ** 2).sum())

    h = leaky_relu(matmul(Tensor(x), w1) + b1, 0.2)
    out = matmul(h, w2) + b2
    backward((out * out).sum())
    fds = finite_difference_grads(loss_value, [w1.data, b1.data, w2.data, b2.data])
    for p, fd in zip([w1, b1, w2, b2], fds):
        assert rel_err(p.grad, fd) <= 1e-4


def test_gather_forward_and_scatter_add_backward():
    x = Tensor(np.arange(12, dtype=float).reshape(4, 3), requires_grad=True)
    idx = np.array([[0, 0], [3, 1]])
    out = gather(x, idx)
    assert out.shape == (2, 2, 3)
    backward(out.sum())
    np.testing.assert_array_equal(x.grad, [[2.0] * 3, [1.0] * 3, [0.0] * 3, [1.0] * 3])


def test_gather_index_out_of_range():
    with pytest.raises(IndexError):
        gather(Tensor(np.zeros((3, 2))), np.array([3]))


def test_concat_splits_gradient():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0, 4.0], [5.0, 6.0]], requires_grad=True)
    out = concat([a, b], axis=0)
    backward((out * Tensor([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])).sum())
    np.testing.assert_array_equal(a.grad, [[1.0, 1.0]])
    np.testing.assert_array_equal(b.grad, [[2.0, 2.0], [3.0, 3.0]])


def test_broadcast_add_unbroadcasts_gradient():
    x = Tensor(np.zeros((3, 2)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    backward(((x + b) * 2.0).sum())
    np.testing.assert_array_equal(b.grad, [6.0, 6.0])
    np.testing.assert_array_equal(x.grad, np.full((3, 2), 2.0))


def test_non_finite_forward_raises():
    x = Tensor([800.0])
    with pytest.raises(NumericError):
        x.exp()


def test_constructor_rejects_nan():
    with pytest.raises(NumericError):
        Tensor([np.nan])


def test_no_grad_blocks_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_clip_gradient_masks_outside():
    x = Tensor([-2.0, 0.5, 2.0], requires_grad=True)
    backward(x.clip(-1.0, 1.0).sum())
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_sqrt_guarded_at_zero():
    x = Tensor([0.0, 4.0], requires_grad=True)
    backward(x.sqrt().sum())
    assert np.isfinite(x.grad).all()
    assert x.grad[1] == pytest.approx(0.25)


@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_composed_graph_fd_property(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)

    def build():
        h = leaky_relu(matmul(a, b), 0.2)
        return ((h * h).mean() + h.max(axis=0).sum()) * 0.5

    from oracles import grad_check
    assert grad_check(build, [a, b]) <= 1e-4


def test_backward_determinism_same_graph():
    rng = np.random.default_rng(11)
    x = Tensor(rng.uniform(-1, 1, (6, 3)), requires_grad=True)

    def run():
        zero_grads([x])
        h = leaky_relu(x * 3.0 + 0.1, 0.2)
        backward((h * h).sum())
        return x.grad.copy()

    np.testing.assert_array_equal(run(), run())
