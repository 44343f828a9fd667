#!/usr/bin/env python3
"""
Autodiff Engine Tests
=====================

Forward values of every primitive, backward rules against central finite
differences (float64, h=1e-5, relative error < 1e-4), accumulation and
error contracts.

Usage:
    pytest test_gradcore.py
"""

from typing import Callable, Sequence

import numpy as np
import pytest

from regtext import gradcore as gc
from regtext.errors import AxisError, DistributionError, GraphError, LabelRangeError, ProbabilityError, ShapeError
from regtext.gradcore import Tensor

RTOL = 1e-4


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(build: Callable[..., Tensor], arrays: Sequence[np.ndarray], seed: int = 0) -> None:
    """Compare backward() against central differences for every input array.

    The scalar under test is ``sum(build(*inputs) * w)`` with a fixed random
    ``w`` so every output element contributes.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    probe = build(*[Tensor(a) for a in arrays])
    weights = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar() -> float:
        with gc.no_grad():
            return float((build(*[Tensor(a) for a in arrays]).data * weights).sum())

    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    loss = gc.reduce_sum(build(*inputs) * weights)
    gc.backward(loss)
    for i, (tensor, array) in enumerate(zip(inputs, arrays)):
        numeric = gc.finite_difference_gradient(scalar, array)
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(array)
        assert relative_error(analytic, numeric) < RTOL, f"input {i}: analytic {analytic} vs numeric {numeric}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# =============================================================================
# FORWARD VALUES
# =============================================================================

def test_relu_values():
    np.testing.assert_array_equal(gc.relu([-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])


def test_add_zero_is_identity(rng):
    x = Tensor(rng.standard_normal((3, 2)))
    np.testing.assert_array_equal(gc.add(x, gc.zeros_like(x)).data, x.data)


def test_tanh_derivative_at_zero():
    x = Tensor(np.array(0.0), requires_grad=True)
    gc.backward(gc.tanh(x))
    assert float(x.grad) == pytest.approx(1.0)


def test_item_needs_a_single_element():
    assert Tensor([[2.5]]).item() == 2.5
    with pytest.raises(GraphError):
        Tensor([1.0, 2.0]).item()


def test_ndarray_on_the_left_builds_a_tensor(rng):
    base = rng.standard_normal(3)
    r = Tensor(rng.standard_normal(3), requires_grad=True)
    out = base + 0.5 * r
    assert isinstance(out, Tensor)
    gc.backward(gc.reduce_sum(1.0 / (2.0 + out * out)))
    assert r.grad.shape == (3,)


def test_matmul_values():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(gc.matmul(np.eye(2), a).data, a)
    np.testing.assert_array_equal(gc.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data, [[11.0]])


def test_matmul_sum_gradient_is_ones_times_b_transpose(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = rng.standard_normal((3, 4))
    gc.backward(gc.reduce_sum(gc.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((2, 4)) @ b.T)


def test_matmul_inner_extent_mismatch():
    with pytest.raises(ShapeError) as info:
        gc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert (2, 3) in info.value.shapes


def test_broadcast_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as info:
        gc.add(np.ones((2, 3)), np.ones((4,)))
    assert info.value.shapes == [(2, 3), (4,)]


def test_reductions_over_time():
    x = np.array([[1.0, 3.0], [3.0, 1.0]])
    np.testing.assert_array_equal(gc.reduce_mean(x, axis=0).data, [2.0, 2.0])
    np.testing.assert_array_equal(gc.reduce_max(x, axis=0).data, [3.0, 3.0])


def test_max_gradient_routes_to_one_position_lowest_on_ties():
    x = Tensor(np.array([[2.0, 5.0], [2.0, 1.0], [0.0, 5.0]]), requires_grad=True)
    value, index = gc.max_with_argmax(x, axis=0)
    np.testing.assert_array_equal(index, [0, 0])
    gc.backward(gc.reduce_sum(value))
    np.testing.assert_array_equal(x.grad, [[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])


def test_max_respects_mask():
    x = np.array([[9.0], [1.0], [2.0]])
    mask = np.array([[False], [True], [True]])
    value, index = gc.max_with_argmax(x, axis=0, mask=mask)
    np.testing.assert_array_equal(value.data, [2.0])
    np.testing.assert_array_equal(index, [2])


def test_empty_axis_is_an_error():
    with pytest.raises(AxisError):
        gc.reduce_max(np.zeros((2, 0)), axis=1)
    with pytest.raises(AxisError):
        gc.reduce_max(np.ones((1, 3)), axis=1, mask=np.zeros((1, 3), dtype=bool))


def test_order_invariant_sum_is_bit_identical_under_permutation(rng):
    x = rng.standard_normal((3, 17, 4)).astype(np.float32)
    shuffled = x[:, rng.permutation(17)]
    a = gc.reduce_sum(x, axis=1, order_invariant=True).data
    b = gc.reduce_sum(shuffled, axis=1, order_invariant=True).data
    np.testing.assert_array_equal(a, b)


def test_cross_entropy_values():
    uniform = gc.softmax_cross_entropy(np.zeros((3, 4)), [0, 1, 3])
    assert float(uniform.data) == pytest.approx(np.log(4.0))
    confident = gc.softmax_cross_entropy(np.array([[10.0, -10.0]]), [0])
    assert float(confident.data) == pytest.approx(np.log1p(np.exp(-20.0)), rel=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(LabelRangeError) as info:
        gc.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
    assert info.value.label == 3
    assert info.value.num_classes == 3


def test_softmax_rows_sum_to_one(rng):
    p = gc.softmax(rng.standard_normal((5, 7)) * 30.0).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_divergence_values():
    p = np.array([[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]])
    assert float(gc.kld(p, p).data) == 0.0
    assert float(gc.mse([[1.0, 0.0]], [[0.0, 1.0]]).data) == pytest.approx(1.0)
    assert float(gc.entropy(np.full((2, 10), 0.1)).data) == pytest.approx(np.log(10.0))


def test_kld_is_nonnegative(rng):
    for _ in range(20):
        p = gc.softmax(rng.standard_normal((4, 5))).data
        q = gc.softmax(rng.standard_normal((4, 5))).data
        assert float(gc.kld(p, q).data) >= 0.0


def test_divergence_rejects_unnormalized_rows():
    with pytest.raises(DistributionError):
        gc.kld([[0.5, 0.6]], [[0.5, 0.5]])
    with pytest.raises(DistributionError):
        gc.entropy([[0.2, 0.2]])


def test_kld_gradient_flows_through_q_only(rng):
    p = Tensor(gc.softmax(rng.standard_normal((2, 3))).data, requires_grad=True)
    z = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    gc.backward(gc.kld(p, gc.softmax(z)))
    assert p.grad is None
    assert z.grad is not None


def test_l2_normalize_values(rng):
    np.testing.assert_allclose(gc.l2_normalize([3.0, 4.0]).data, [0.6, 0.8])
    np.testing.assert_array_equal(gc.l2_normalize([0.0, 0.0]).data, [0.0, 0.0])
    v = rng.standard_normal(6)
    assert np.linalg.norm(gc.l2_normalize(v).data) == pytest.approx(1.0)


def test_l2_normalize_is_per_example_for_batches(rng):
    v = rng.standard_normal((4, 3, 2))
    v[2] = 0.0
    norms = np.sqrt((gc.l2_normalize(v).data ** 2).sum(axis=(1, 2)))
    np.testing.assert_allclose(norms, [1.0, 1.0, 0.0, 1.0])


# =============================================================================
# DROPOUT
# =============================================================================

def test_dropout_rate_zero_is_identity(rng):
    x = Tensor(rng.standard_normal((4, 4)))
    assert gc.dropout(x, 0.0, rng) is x


def test_dropout_disabled_when_not_training(rng):
    x = Tensor(rng.standard_normal((4, 4)))
    np.testing.assert_array_equal(gc.dropout(x, 0.5, rng, training=False).data, x.data)


def test_dropout_preserves_expectation():
    x = np.ones(100_000)
    out = gc.dropout(x, 0.2, np.random.default_rng(7)).data
    assert out.mean() == pytest.approx(1.0, rel=1e-2)


def test_dropout_same_seed_same_mask():
    a = gc.dropout_mask((50,), 0.5, np.random.default_rng(3))
    b = gc.dropout_mask((50,), 0.5, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_dropout_rate_one_is_an_error(rng):
    with pytest.raises(ProbabilityError):
        gc.dropout(np.ones(3), 1.0, rng)


# =============================================================================
# BACKWARD
# =============================================================================

def test_backward_of_sum_is_ones():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    gc.backward(gc.reduce_sum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_two_backwards_accumulate():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    loss = gc.reduce_sum(x * x)
    gc.backward(loss)
    gc.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * 2 * x.data)


def test_shared_subexpression_is_visited_once():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * 2.0
    gc.backward(gc.reduce_sum(y * y + y))
    # d/dx (4x^2 + 2x) = 8x + 2
    np.testing.assert_allclose(x.grad, [26.0])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        gc.backward(x * 2.0)


def test_functional_grad_leaves_grad_slots_alone(rng):
    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    loss = gc.softmax_cross_entropy(x @ w, [0, 1, 1, 0])
    (gx,) = gc.grad(loss, [x])
    assert x.grad is None and w.grad is None
    gc.backward(loss)
    np.testing.assert_allclose(gx, x.grad)


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with gc.no_grad():
        y = gc.exp(x)
    assert not y.requires_grad
    assert gc.is_grad_enabled()


def test_repeated_take_accumulates(rng):
    table = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    gc.backward(gc.reduce_sum(table[np.array([1, 1, 3])]))
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


# =============================================================================
# FINITE DIFFERENCES
# =============================================================================

def _away_from_zero(rng, shape, low=0.2):
    return rng.uniform(low, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def test_elementwise_gradients(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    positive = rng.uniform(0.5, 2.0, size=(3, 4))
    check_gradients(gc.add, [a, b])
    check_gradients(gc.subtract, [a, b[0:1]])
    check_gradients(gc.multiply, [a, b])
    check_gradients(gc.divide, [a, positive])
    check_gradients(gc.negate, [a])
    check_gradients(gc.exp, [a])
    check_gradients(gc.log, [positive])
    check_gradients(gc.sqrt, [positive])
    check_gradients(gc.tanh, [a])
    check_gradients(gc.sigmoid, [a])
    check_gradients(gc.relu, [_away_from_zero(rng, (3, 4))])
    check_gradients(gc.maximum, [a, a + _away_from_zero(rng, (3, 4))])


def test_broadcast_gradients(rng):
    check_gradients(gc.add, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4,))])
    check_gradients(gc.multiply, [rng.standard_normal((2, 3, 4)), rng.standard_normal((1, 3, 1))])


def test_linear_and_shape_gradients(rng):
    check_gradients(gc.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))])
    check_gradients(lambda x: gc.reshape(x, (6, 2)), [rng.standard_normal((3, 4))])
    check_gradients(lambda x: gc.take(x, np.array([[0, 2], [2, 1]])), [rng.standard_normal((3, 4))])
    check_gradients(lambda x: x[:, 1:3], [rng.standard_normal((3, 4))])
    check_gradients(lambda a, b: gc.concat([a, b], axis=1), [rng.standard_normal((2, 3)), rng.standard_normal((2, 1))])
    check_gradients(lambda a, b: gc.stack([a, b], axis=1), [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))])
    check_gradients(lambda x: gc.pad(x, [(0, 0), (2, 1)]), [rng.standard_normal((2, 3))])


def test_reduction_gradients(rng):
    x = rng.standard_normal((3, 5, 2))
    check_gradients(lambda t: gc.reduce_sum(t, axis=1), [x])
    check_gradients(lambda t: gc.reduce_sum(t, axis=1, order_invariant=True), [x])
    check_gradients(lambda t: gc.reduce_mean(t, axis=2, keepdims=True), [x])
    check_gradients(lambda t: gc.reduce_mean(t), [x])
    check_gradients(lambda t: gc.reduce_max(t, axis=1), [x])
    mask = np.array([[1, 1, 0, 0, 0], [1, 1, 1, 1, 1], [1, 0, 0, 0, 0]], dtype=bool)[:, :, None]
    check_gradients(lambda t: gc.reduce_max(t, axis=1, mask=mask), [x])


def test_probability_gradients(rng):
    z = rng.standard_normal((3, 4))
    z2 = rng.standard_normal((3, 4))
    check_gradients(gc.softmax, [z])
    check_gradients(gc.log_softmax, [z])
    check_gradients(lambda t: gc.softmax_cross_entropy(t, [0, 3, 1]), [z])
    check_gradients(lambda a, b: gc.mse(gc.softmax(a), gc.softmax(b)), [z, z2])
    p = gc.softmax(z2).data
    check_gradients(lambda t: gc.kld(p, gc.softmax(t)), [z])
    check_gradients(lambda t: gc.entropy(gc.softmax(t)), [z])


def test_l2_normalize_gradients(rng):
    check_gradients(gc.l2_normalize, [rng.standard_normal(5)])
    check_gradients(gc.l2_normalize, [rng.standard_normal((3, 2, 2))])


def test_composite_gradient(rng):
    def layer(x, w, b):
        hidden = gc.tanh(x @ w + b)
        return gc.concat([gc.reduce_max(hidden, axis=1), gc.reduce_mean(hidden, axis=1)], axis=1)

    check_gradients(layer, [rng.standard_normal((2, 4, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)])


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
