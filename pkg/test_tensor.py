"""Gradient and semantics checks for the autodiff engine."""

import numpy as np
import pytest

from exceptions import ShapeError, ValidationError
from tensor import (
    Tensor, add, backward, batch_norm_op, concat, conv1d, elementwise, expand, finite_difference_gradient,
    matmul, maxpool1d, mul, narrow, no_grad, relative_error, relu, reshape,
    same_padding, scale, select, sigmoid, softmax, softmax_cross_entropy, stack,
    sum_all, tanh
)

TOLERANCE = 1e-6


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def weighted_sum(y: Tensor, seed: int = 99) -> Tensor:
    weights = np.random.default_rng(seed).normal(size=y.shape)
    return sum_all(mul(y, Tensor(weights)))


def assert_gradients_match(build_loss, tensors):
    for t in tensors:
        t.zero_grad()
    backward(build_loss())
    for t in tensors:
        numeric = finite_difference_gradient(lambda: build_loss().item(), t, h=1e-5)
        assert relative_error(t.grad, numeric) < TOLERANCE


class TestGradients:
    def test_matmul(self):
        rng = np.random.default_rng(0)
        a, b = param(rng, 3, 4), param(rng, 4, 2)
        assert_gradients_match(lambda: weighted_sum(matmul(a, b)), [a, b])

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_conv1d_same(self, stride):
        rng = np.random.default_rng(1)
        x, w = param(rng, 2, 11, 2), param(rng, 4, 2, 3)
        assert_gradients_match(lambda: weighted_sum(conv1d(x, w, stride, "same")), [x, w])

    def test_conv1d_valid(self):
        rng = np.random.default_rng(2)
        x, w = param(rng, 1, 9, 1), param(rng, 3, 1, 2)
        assert_gradients_match(lambda: weighted_sum(conv1d(x, w, 2, "valid")), [x, w])

    def test_maxpool(self):
        rng = np.random.default_rng(3)
        x = param(rng, 2, 13, 3)
        assert_gradients_match(lambda: weighted_sum(maxpool1d(x, 4, 3)), [x])

    def test_elementwise_chain(self):
        rng = np.random.default_rng(4)
        a, b = param(rng, 3, 5), param(rng, 3, 5)
        assert_gradients_match(
            lambda: weighted_sum(mul(tanh(a), sigmoid(scale(b, 0.7))) + relu(a)), [a, b]
        )

    def test_structural_ops(self):
        rng = np.random.default_rng(5)
        a, b, v = param(rng, 2, 3, 4), param(rng, 2, 3, 4), param(rng, 4)

        def loss():
            joined = concat([a, b], axis=1)
            stacked = stack([select(joined, 0, axis=1), select(narrow(joined, 1, 5, axis=1), 2, axis=1)], axis=0)
            moved = reshape(stacked, (4, 4))
            return weighted_sum(moved + expand(v, (4, 4)))

        assert_gradients_match(loss, [a, b, v])

    def test_batch_norm_with_batch_statistics(self):
        rng = np.random.default_rng(6)
        x, gamma, beta = param(rng, 4, 5, 3), param(rng, 3), param(rng, 3)
        assert_gradients_match(lambda: weighted_sum(batch_norm_op(x, gamma, beta, 1e-5)[0]), [x, gamma, beta])

    def test_batch_norm_with_fixed_statistics(self):
        rng = np.random.default_rng(7)
        x, gamma, beta = param(rng, 6, 3), param(rng, 3), param(rng, 3)
        mean, var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
        assert_gradients_match(
            lambda: weighted_sum(batch_norm_op(x, gamma, beta, 1e-5, mean, var)[0]), [x, gamma, beta]
        )

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(8)
        logits = param(rng, 6, 5)
        targets = np.array([0, 1, 2, 3, 4, 2])
        assert_gradients_match(lambda: softmax_cross_entropy(logits, targets), [logits])


class TestSemantics:
    def test_same_padding_puts_odd_unit_right(self):
        assert same_padding(10, 4, 3) == (4, 1, 2)
        assert same_padding(3000, 50, 6) == (500, 22, 22)

    def test_conv1d_known_values(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1))
        w = Tensor(np.ones((2, 1, 1)))
        np.testing.assert_allclose(conv1d(x, w).data.reshape(-1), [3.0, 5.0, 7.0, 4.0])

    def test_maxpool_known_values_and_tie_routing(self):
        x = Tensor(np.array([1.0, 3.0, 2.0, 5.0, 4.0]).reshape(1, 5, 1), requires_grad=True)
        np.testing.assert_allclose(maxpool1d(x, 2, 2).data.reshape(-1), [3.0, 5.0, 4.0])

        tied = Tensor(np.array([2.0, 2.0]).reshape(1, 2, 1), requires_grad=True)
        backward(sum_all(maxpool1d(tied, 2, 2)))
        np.testing.assert_array_equal(tied.grad.reshape(-1), [1.0, 0.0])

    def test_filter_wider_than_padded_input(self):
        with pytest.raises(ShapeError):
            conv1d(Tensor(np.zeros((1, 3, 1))), Tensor(np.zeros((5, 1, 1))), padding="valid")

    def test_shape_errors_name_operation(self):
        with pytest.raises(ShapeError) as info:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert "matmul" in info.value.format_message()

    def test_sigmoid_saturates_without_overflow(self):
        out = sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
        assert np.all(np.isfinite(out))

    def test_softmax_rows_sum_to_one(self):
        probs = softmax(np.array([[1000.0, 0.0, -1000.0], [1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_gradients_accumulate(self):
        x = Tensor(np.ones(3), requires_grad=True)
        backward(sum_all(scale(x, 2.0)))
        backward(sum_all(scale(x, 2.0)))
        np.testing.assert_allclose(x.grad, 4.0)

    def test_backward_rejects_non_scalar_and_constant_losses(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(scale(x, 1.0))
        with pytest.raises(ValidationError):
            backward(sum_all(Tensor(np.ones(3))))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = scale(x, 3.0)
        assert not y.requires_grad
        assert y.is_leaf

    def test_long_chains_do_not_recurse(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = x
        for _ in range(5000):
            y = scale(y, 1.0)
        graph = backward(sum_all(y))
        assert len(graph) == 5002
        np.testing.assert_allclose(x.grad, 1.0)


class TestElementwise:
    @pytest.mark.parametrize("name, direct", [("relu", relu), ("tanh", tanh), ("sigmoid", sigmoid)])
    def test_unary_ops_by_name(self, name, direct):
        x = Tensor(np.linspace(-2.0, 2.0, 7))
        np.testing.assert_array_equal(elementwise(name, x).data, direct(x).data)

    @pytest.mark.parametrize("name, direct", [("add", add), ("mul", mul)])
    def test_binary_ops_by_name(self, name, direct):
        a, b = Tensor(np.arange(4.0)), Tensor(np.full(4, 3.0))
        np.testing.assert_array_equal(elementwise(name, a, b).data, direct(a, b).data)

    def test_gradients_flow_through_dispatch(self):
        rng = np.random.default_rng(11)
        a, b = param(rng, 3, 2), param(rng, 3, 2)
        assert_gradients_match(lambda: weighted_sum(elementwise("mul", a, elementwise("tanh", b))), [a, b])

    def test_unknown_op(self):
        with pytest.raises(ValidationError):
            elementwise("softplus", Tensor(np.ones(2)))
