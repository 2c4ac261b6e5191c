import math

import mpmath
import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from gnnedit.diffcore import (GradientVector, LayoutMismatchError, ParamLayout, ParamVector, Tape,
                              TapeError, affine, axpy, backward, dot, dropout, finite_diff_gradient,
                              norm, relu, scale, softmax_cross_entropy, spmm)
from gnnedit.graphcore import Graph, build_normalized_adjacency


def test_layout_is_contiguous():
    lay = ParamLayout.from_shapes([("W", (3, 2)), ("b", (2,)), ("V", (2, 4))])
    assert lay.size == 16
    assert [s.offset for s in lay.specs] == [0, 6, 8]
    theta = np.arange(16.0)
    v = lay.views(theta)
    v["b"][:] = -1
    assert theta[6] == -1 and theta[7] == -1
    with pytest.raises(LayoutMismatchError):
        lay.views(np.zeros(15))


def test_affine_trivial_cases():
    W = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(affine(np.eye(3), W, np.zeros(2)), W)
    b = np.array([1.5, -2.0])
    np.testing.assert_array_equal(affine(np.ones((4, 3)), np.zeros((3, 2)), b), np.tile(b, (4, 1)))
    with pytest.raises(ValueError):
        affine(np.ones((2, 3)), np.ones((2, 2)))


def test_affine_matches_naive_loop():
    rng = np.random.default_rng(0)
    X, W, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    ref = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            ref[i, j] = b[j] + sum(X[i, k] * W[k, j] for k in range(3))
    np.testing.assert_allclose(affine(X, W, b), ref, rtol=0, atol=1e-14)


def test_spmm_cases():
    X = np.array([[1.0, 2.0], [3.0, 5.0]])
    single = build_normalized_adjacency(Graph(1, [], X[:1], [0], 1))
    np.testing.assert_array_equal(spmm(single, X[:1]), X[:1])
    pair = build_normalized_adjacency(Graph(2, [(0, 1)], X, [0, 1], 2))
    np.testing.assert_allclose(spmm(pair, X), np.tile(X.mean(axis=0), (2, 1)), atol=1e-15)
    rng = np.random.default_rng(1)
    M = sp.random(10, 10, density=0.3, random_state=2, format="csr")
    Y = rng.normal(size=(10, 3))
    np.testing.assert_allclose(spmm(M, Y), M.toarray() @ Y, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        spmm(M, np.ones((9, 2)))


def test_relu_and_dropout():
    assert relu(np.array([-1.0]))[0] == 0.0 and relu(np.array([2.0]))[0] == 2.0
    X = np.random.default_rng(0).normal(size=(5, 4))
    out, mask = dropout(X, 0.5, rng=0, training=False)
    assert out is X and mask is None
    a, _ = dropout(X, 0.3, rng=11, training=True)
    b, _ = dropout(X, 0.3, rng=11, training=True)
    np.testing.assert_array_equal(a, b)


def test_dropout_mean_monte_carlo():
    X = np.full((100_000, 1), 2.0)
    out, _ = dropout(X, 0.1, rng=3, training=True)
    assert abs(out.mean() - 2.0) < 0.02


def test_cross_entropy_uniform_and_saturation():
    loss, _ = softmax_cross_entropy(np.zeros((1, 4)), [0], [0])
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    logits = np.array([[50.0, 0.0]])
    assert softmax_cross_entropy(logits, [0], [0])[0] < 1e-20
    with pytest.raises(ValueError):
        softmax_cross_entropy(logits, [0], [])


def test_cross_entropy_high_precision():
    rng = np.random.default_rng(4)
    logits = rng.normal(scale=3, size=(5, 3))
    labels = rng.integers(0, 3, size=5)
    mpmath.mp.dps = 50
    ref = mpmath.mpf(0)
    for i in range(5):
        lse = mpmath.log(sum(mpmath.exp(mpmath.mpf(float(z))) for z in logits[i]))
        ref += lse - mpmath.mpf(float(logits[i, labels[i]]))
    ref /= 5
    loss, _ = softmax_cross_entropy(logits, labels, np.arange(5))
    assert abs(loss - float(ref)) < 1e-12


def test_cross_entropy_gradient_ignores_other_labels():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 3))
    _, d1 = softmax_cross_entropy(logits, [0, 1, 2, 0], [0, 1])
    _, d2 = softmax_cross_entropy(logits, [0, 1, 0, 2], [0, 1])
    np.testing.assert_array_equal(d1, d2)
    assert np.all(d1[2:] == 0)


def _linear_tape(W, x, y):
    """One-node linear softmax model logits = x W on a hand-rolled tape."""
    lay = ParamLayout.from_shapes([("W", W.shape), ("unused", (3,))])
    tape = Tape()
    logits = x[None, :] @ W
    tape.set_backward(lambda t, d: np.concatenate([(x[:, None] @ d[:1]).ravel(), np.zeros(3)]), lay)
    tape.seed(*softmax_cross_entropy(logits, [y], [0]))
    return tape, logits


def test_backward_linear_identity():
    rng = np.random.default_rng(2)
    W, x = rng.normal(size=(4, 3)), rng.normal(size=4)
    tape, logits = _linear_tape(W, x, 1)
    g = backward(tape)
    p = np.exp(logits[0] - logits[0].max())
    p /= p.sum()
    expected = np.outer(x, p - np.eye(3)[1])
    np.testing.assert_allclose(g.views()["W"], expected, atol=1e-14)
    assert np.all(g.views()["unused"] == 0)


def test_backward_errors():
    with pytest.raises(TapeError):
        backward(Tape())
    t = Tape()
    with pytest.raises(TapeError):
        t.seed(0.0, np.zeros((1, 1)))
    tape, _ = _linear_tape(np.ones((4, 3)), np.ones(4), 0)
    backward(tape)
    with pytest.raises(TapeError):
        backward(tape)


def test_finite_diff_simple_functions():
    theta = np.array([0.3, -1.2, 2.5])
    g = finite_diff_gradient(lambda t: 0.5 * t @ t, theta, eps=1e-6)
    np.testing.assert_allclose(g, theta, atol=1e-10)
    c = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(finite_diff_gradient(lambda t: c @ t, theta), c, atol=1e-9)
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda t: 0.0, theta, eps=0)


def test_vector_ops():
    lay = ParamLayout.from_shapes([("a", (5,))])
    g = GradientVector(np.array([3.0, 4.0, 0, 0, 0]), lay)
    assert dot(g, g) == pytest.approx(norm(g) ** 2)
    assert np.all(scale(g, 0).data == 0)
    p = ParamVector(np.ones(5), lay)
    np.testing.assert_array_equal(axpy(-1.0, g, p).data, 1.0 - g.data)
    other = GradientVector(np.ones(4), ParamLayout.from_shapes([("a", (4,))]))
    with pytest.raises(LayoutMismatchError):
        dot(g, other)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_dot_against_compensated_sum(seed):
    rng = np.random.default_rng(seed)
    lay = ParamLayout.from_shapes([("v", (200,))])
    a, b = (GradientVector(rng.normal(size=200), lay) for _ in range(2))
    ref = math.fsum(float(x) * float(y) for x, y in zip(a.data, b.data))
    assert abs(dot(a, b) - ref) < 1e-13 * max(1.0, math.fsum(abs(x * y) for x, y in zip(a.data, b.data)))
