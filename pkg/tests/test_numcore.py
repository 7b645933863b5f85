import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conceptground import NumericError, ShapeError
from conceptground.numcore import (
    AdamState,
    adam_step,
    affine,
    affine_backward,
    cross_entropy,
    grad_check,
    relu,
    softmax,
    softmax_cross_entropy_backward,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_affine(W, b, X):
    out = [[0.0] * len(X[0]) for _ in range(len(W))]
    for i in range(len(W)):
        for j in range(len(X[0])):
            acc = b[i]
            for r in range(len(X)):
                acc += W[i][r] * X[r][j]
            out[i][j] = acc
    return np.array(out)


def test_affine_identity():
    X = np.array([[1.0, -1.0], [2.0, 3.0]])
    np.testing.assert_array_equal(affine(np.eye(2), np.zeros(2), X), X)


def test_affine_zero_weights_broadcasts_bias():
    X = np.random.default_rng(0).normal(size=(2, 5))
    out = affine(np.zeros((2, 2)), np.array([1.0, -1.0]), X)
    np.testing.assert_array_equal(out, [[1.0] * 5, [-1.0] * 5])


def test_affine_matches_triple_loop():
    rng = np.random.default_rng(1)
    W, b, X = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(4, 2))
    np.testing.assert_allclose(affine(W, b, X), naive_affine(W.tolist(), b.tolist(), X.tolist()), rtol=0, atol=1e-12)


def test_affine_shape_error_names_operands():
    with pytest.raises(ShapeError, match="W"):
        affine(np.zeros((3, 4)), np.zeros(3), np.zeros((5, 2)))


def test_affine_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    W, b, X = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(4, 5))
    G = rng.normal(size=(3, 5))
    dW, db, dX = affine_backward(G, W, X)

    def fn(flat):
        W_ = flat[:12].reshape(3, 4)
        b_ = flat[12:15]
        X_ = flat[15:].reshape(4, 5)
        return float((affine(W_, b_, X_) * G).sum()), np.concatenate([dW.ravel(), db, dX.ravel()])

    # the analytic gradient is fixed at the base point; the loss is linear in
    # each coordinate so finite differences are exact up to rounding
    assert grad_check(fn, np.concatenate([W.ravel(), b, X.ravel()])) < 1e-8


def test_relu_sign_cases():
    np.testing.assert_array_equal(relu(np.array([[-1.0, 0.0], [2.0, -3.0]])), [[0, 0], [2, 0]])


@given(arrays(np.float64, (4, 6), elements=st.floats(0, 100)))
def test_relu_identity_on_nonnegative(x):
    np.testing.assert_array_equal(relu(x), x)


def test_relu_elementwise_oracle():
    x = np.random.default_rng(3).normal(size=(7, 9))
    out = relu(x)
    for i in range(7):
        for j in range(9):
            assert out[i, j] == max(x[i, j], 0.0)


def test_softmax_uniform_and_analytic():
    np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_allclose(softmax(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_softmax_extended_precision_oracle():
    z = np.random.default_rng(4).normal(scale=3, size=5)
    mpmath.mp.dps = 50
    exps = [mpmath.exp(mpmath.mpf(float(v))) for v in z]
    total = mpmath.fsum(exps)
    expected = np.array([float(e / total) for e in exps])
    np.testing.assert_allclose(softmax(z), expected, rtol=0, atol=1e-14)


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)))
def test_softmax_is_distribution(z):
    p = softmax(z)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


@given(arrays(np.float64, 6, elements=finite), finite)
def test_softmax_shift_invariant(z, c):
    np.testing.assert_allclose(softmax(z), softmax(z + c), atol=1e-12)


def test_cross_entropy_values():
    assert cross_entropy(np.array([0.0, 1.0, 0.0]), 1) == 0.0
    assert cross_entropy(np.full(4, 0.25), 2) == pytest.approx(math.log(4), abs=1e-15)
    assert cross_entropy(np.array([0.5, 0.25, 0.25]), 1) == pytest.approx(1.386294, abs=1e-6)


def test_cross_entropy_floor_keeps_loss_finite():
    assert cross_entropy(np.array([1.0, 0.0]), 1) == pytest.approx(-math.log(1e-12))


def test_softmax_cross_entropy_backward_is_p_minus_onehot():
    p = softmax(np.array([0.3, -1.0, 2.0]))
    np.testing.assert_allclose(softmax_cross_entropy_backward(p, 2), p - np.array([0, 0, 1.0]))


def test_adam_zero_gradient_is_fixed_point():
    x = np.array([1.0, -2.0, 3.0])
    adam_step(x, np.zeros(3), AdamState(3))
    np.testing.assert_array_equal(x, [1.0, -2.0, 3.0])


def test_adam_first_step_moves_by_lr_sign():
    g = np.array([0.5, -2.0, 1e-2, -7.0])
    x = np.zeros(4)
    adam_step(x, g, AdamState(4, lr=1e-3))
    np.testing.assert_allclose(x, -1e-3 * np.sign(g), rtol=1e-5)


def reference_adam(x0, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    x = list(x0)
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for t in range(1, steps + 1):
        g = grad_fn(x)
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            x[i] -= lr * mh / (math.sqrt(vh) + eps)
    return x


def test_adam_matches_reference_on_quadratic():
    A = np.diag([1.0, 3.0, 0.5])
    x0 = [1.0, -2.0, 0.25]
    x = np.array(x0)
    state = AdamState(3, lr=0.05)
    for _ in range(10):
        adam_step(x, A @ x, state)
    ref = reference_adam(x0, lambda v: [A[i, i] * v[i] for i in range(3)], 10, lr=0.05)
    np.testing.assert_allclose(x, ref, rtol=0, atol=1e-10)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(np.zeros(3), np.zeros(4), AdamState(3))


def test_grad_check_single_layer_softmax_ce():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(4, 1))
    target = 2

    def fn(flat):
        W, b = flat[:12].reshape(3, 4), flat[12:]
        p = softmax(affine(W, b, X)[:, 0])
        d = softmax_cross_entropy_backward(p, target)
        return cross_entropy(p, target), np.concatenate([np.outer(d, X[:, 0]).ravel(), d])

    assert grad_check(fn, rng.normal(size=15)) < 1e-6


def test_grad_check_constant_function():
    assert grad_check(lambda x: (3.0, np.zeros_like(x)), np.ones(5)) == 0.0


def test_grad_check_flags_wrong_gradient():
    assert grad_check(lambda x: (float(x @ x), x), np.ones(3)) > 0.4


def test_grad_check_nonfinite_names_coordinate():
    def fn(x):
        return (float("inf") if x[1] > 1.0 else 0.0), np.zeros_like(x)

    with pytest.raises(NumericError, match="coordinate 1"):
        grad_check(fn, np.array([0.0, 1.0]))


@settings(max_examples=30)
@given(arrays(np.float64, 5, elements=st.floats(-3, 3)), st.integers(0, 4))
def test_softmax_ce_gradient_property(z, target):
    def fn(x):
        p = softmax(x)
        return cross_entropy(p, target), softmax_cross_entropy_backward(p, target)

    assert grad_check(fn, z) < 1e-5
