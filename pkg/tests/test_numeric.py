import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pseudodist.errors import ConfigError, DimensionError
from pseudodist.numeric import (
    Param, affine_backward, affine_forward, clip_grad_norm, dropout, dropout_backward,
    global_grad_norm, grad_check, leaky_relu, leaky_relu_backward, make_rng,
)


def test_affine_identity():
    W = Param(np.eye(2))
    b = Param(np.zeros((1, 2)), decay=False)
    np.testing.assert_array_equal(affine_forward(np.array([[1.0, 2.0]]), W, b), [[1, 2]])


def test_affine_hand_multiply():
    W = Param(np.array([[2.0, 3.0], [5.0, 7.0]]))
    b = Param(np.ones((1, 2)), decay=False)
    np.testing.assert_array_equal(affine_forward(np.array([[1.0, 0.0]]), W, b), [[3, 4]])


def test_affine_backward_bias_is_column_sum():
    rng = make_rng(0, "test")
    x = rng.normal(size=(5, 3))
    W = Param(rng.normal(size=(3, 4)))
    b = Param(np.zeros((1, 4)), decay=False)
    dx = affine_backward(x, W, b, np.ones((5, 4)))
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 5.0))
    np.testing.assert_allclose(W.grad, x.T @ np.ones((5, 4)))
    np.testing.assert_allclose(dx, np.ones((5, 4)) @ W.value.T)


def test_affine_shape_errors():
    W = Param(np.zeros((3, 2)))
    with pytest.raises(DimensionError):
        affine_forward(np.zeros((1, 2)), W, None)
    with pytest.raises(DimensionError):
        affine_forward(np.zeros((1, 3)), W, Param(np.zeros((1, 3))))
    with pytest.raises(DimensionError):
        Param(np.zeros(3))


def test_leaky_relu_values():
    x = np.array([[3.0, -1.0, 0.0]])
    np.testing.assert_array_equal(leaky_relu(x, 0.01), [[3.0, -0.01, 0.0]])
    # x == 0 takes the slope branch
    np.testing.assert_array_equal(leaky_relu_backward(x, np.ones_like(x), 0.01), [[1.0, 0.01, 0.01]])


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(0.001, 0.999))
def test_leaky_relu_matches_two_branch_definition(values, slope):
    x = np.array([values])
    expected = np.where(x > 0, x, slope * x)
    np.testing.assert_array_equal(leaky_relu(x, slope), expected)
    np.testing.assert_array_equal(leaky_relu_backward(x, np.ones_like(x), slope),
                                  np.where(x > 0, 1.0, slope))


def test_dropout_eval_and_zero_p_are_identity():
    x = np.arange(6.0).reshape(2, 3)
    y, mask = dropout(x, 0.5, False, None)
    assert y is x and mask is None
    y, mask = dropout(x, 0.0, True, make_rng(0, "d"))
    assert y is x and mask is None
    assert dropout_backward(x, None) is x


def test_dropout_preserves_mean():
    x = np.ones((1, 100_000))
    y, mask = dropout(x, 0.5, True, make_rng(0, "dropout"))
    assert abs(y.mean() - 1.0) <= 0.02
    assert set(np.unique(y)) <= {0.0, 2.0}
    np.testing.assert_array_equal(dropout_backward(np.ones_like(x), mask), y)


def test_dropout_rejects_bad_p():
    with pytest.raises(ConfigError):
        dropout(np.ones((1, 2)), 1.0, True, make_rng(0))
    with pytest.raises(ConfigError):
        dropout(np.ones((1, 2)), 0.5, True, None)


def test_grad_check_linear_and_quadratic():
    theta = Param(np.array([[1.0, 2.0]]))

    def linear():
        theta.grad += 1.0
        return float(theta.value.sum())

    assert grad_check(linear, [theta]) < 1e-10

    def quadratic():
        theta.grad += theta.value
        return 0.5 * float(np.sum(theta.value ** 2))

    assert grad_check(quadratic, [theta]) < 1e-8


def test_grad_check_detects_wrong_gradient():
    theta = Param(np.array([[1.0, 2.0]]))

    def wrong():
        theta.grad += 2.0 * theta.value
        return 0.5 * float(np.sum(theta.value ** 2))

    assert grad_check(wrong, [theta]) > 0.3


def test_grad_check_eps_range():
    theta = Param(np.zeros((1, 1)))
    with pytest.raises(ConfigError):
        grad_check(lambda: 0.0, [theta], eps=1e-2)


def test_grad_check_subset_restores_values():
    rng = make_rng(3, "test")
    theta = Param(rng.normal(size=(10, 10)))
    before = theta.value.copy()

    def f():
        theta.grad += np.cos(theta.value)
        return float(np.sum(np.sin(theta.value)))

    assert grad_check(f, [theta], max_coords=7) < 1e-7
    np.testing.assert_array_equal(theta.value, before)


def test_clip_grad_norm():
    a, b = Param(np.zeros((1, 2))), Param(np.zeros((1, 1)))
    a.grad[...] = [[3.0, 0.0]]
    b.grad[...] = [[4.0]]
    assert global_grad_norm([a, b]) == 5.0
    assert clip_grad_norm([a, b], 1.0) == 5.0
    assert global_grad_norm([a, b]) == pytest.approx(1.0)
    np.testing.assert_allclose(a.grad, [[0.6, 0.0]])
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)
    np.testing.assert_allclose(b.grad, [[0.8]])


def test_rng_streams_are_independent_and_repeatable():
    a = make_rng(5, "sampler").random(4)
    np.testing.assert_array_equal(a, make_rng(5, "sampler").random(4))
    assert not np.array_equal(a, make_rng(5, "dropout").random(4))
    assert not np.array_equal(a, make_rng(6, "sampler").random(4))


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
def test_affine_backward_matches_finite_differences(n_in, n_out, rows, seed):
    rng = make_rng(seed, "prop")
    x = rng.normal(size=(rows, n_in))
    W = Param(rng.normal(size=(n_in, n_out)))
    b = Param(rng.normal(size=(1, n_out)), decay=False)
    target = rng.normal(size=(rows, n_out))

    def loss():
        y = affine_forward(x, W, b)
        affine_backward(x, W, b, y - target)
        return 0.5 * float(np.sum((y - target) ** 2))

    assert grad_check(loss, [W, b]) < 1e-6
