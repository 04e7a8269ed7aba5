import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rwf.numerics import (
    AdamMoments,
    NonFiniteError,
    RngStream,
    adam_step,
    cross_entropy,
    cross_entropy_with_grad,
    finite_diff_grad,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_backward,
    logsumexp,
    masked_logits,
    matmul,
    row_softmax,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_softmax_hand_values():
    # softmax([0, ln 2]) = [1/3, 2/3]
    p = row_softmax(np.array([[0.0, np.log(2.0)]]))
    np.testing.assert_allclose(p, [[1 / 3, 2 / 3]], rtol=0, atol=1e-15)


def test_softmax_scale_and_shift():
    s = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(row_softmax(s, 2.0), row_softmax(2 * s + 100.0), atol=1e-15)


def test_softmax_extreme_inputs_stay_finite():
    p = row_softmax(np.array([[1e4, -1e4, 0.0]]))
    assert np.all(np.isfinite(p)) and p[0, 0] == 1.0


@given(arrays(np.float64, (3, 5), elements=finite), st.floats(0.01, 10))
@settings(max_examples=100, deadline=None)
def test_softmax_rows_stochastic(s, scale):
    p = row_softmax(s, scale)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_rejects_nonfinite_and_bad_scale():
    with pytest.raises(NonFiniteError):
        row_softmax(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        row_softmax(np.ones(3), 0.0)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_layer_norm_against_direct_formula(rng):
    x = rng.normal((4, 7), 3.0)
    g, b = rng.child(1).normal((7,), 1.0), rng.child(2).normal((7,), 1.0)
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    expected = (x - mu) / np.sqrt(var + 1e-5) * g + b
    np.testing.assert_allclose(layer_norm(x, g, b), expected, atol=1e-13)


def test_layer_norm_backward_matches_finite_differences(rng):
    x = rng.normal((3, 5), 1.0)
    g, b = rng.child(1).normal((5,), 1.0), rng.child(2).normal((5,), 1.0)
    w = rng.child(3).normal((3, 5), 1.0)
    _, cache = layer_norm(x, g, b, return_cache=True)
    dx, dg, db = layer_norm_backward(w, cache)
    fd = finite_diff_grad(lambda v: float((layer_norm(v.reshape(3, 5), g, b) * w).sum()), x)
    np.testing.assert_allclose(dx.ravel(), fd, atol=1e-8)
    fd_g = finite_diff_grad(lambda v: float((layer_norm(x, v, b) * w).sum()), g)
    np.testing.assert_allclose(dg, fd_g, atol=1e-8)
    np.testing.assert_allclose(db, w.sum(axis=0), atol=1e-12)


def test_cross_entropy_hand_value():
    # uniform logits over 4 classes -> ln 4
    assert cross_entropy(np.zeros((2, 4)), [0, 3]) == pytest.approx(np.log(4.0), abs=1e-15)
    # mask of two classes -> ln 2, masked columns get no gradient
    loss, g = cross_entropy_with_grad(np.zeros((1, 4)), [1], mask=[1, 2])
    assert loss == pytest.approx(np.log(2.0), abs=1e-15)
    np.testing.assert_allclose(g, [[0.0, -0.5, 0.5, 0.0]], atol=1e-15)


def test_cross_entropy_gradient_matches_finite_differences(rng):
    z = rng.normal((3, 6), 2.0)
    y = np.array([0, 5, 2])
    mask = np.array([True, False, True, True, False, True])
    _, g = cross_entropy_with_grad(z, y, mask)
    fd = finite_diff_grad(lambda v: cross_entropy(v.reshape(3, 6), y, mask), z)
    np.testing.assert_allclose(g.ravel(), fd, atol=1e-9)


def test_cross_entropy_rejects_masked_label():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3)), [0], mask=[1, 2])


def test_masked_logits():
    out = masked_logits(np.array([1.0, 2.0, 3.0]), [0, 2])
    assert out[1] == -np.inf and out[0] == 1.0 and out[2] == 3.0


def test_logsumexp_hand_value():
    assert logsumexp([0.0, 0.0]) == pytest.approx(np.log(2.0), abs=1e-15)
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000.0 + np.log(2.0), abs=1e-12)


def test_gelu_values_and_grad():
    assert gelu(np.array(0.0)) == 0.0
    # tanh form at x=1: 0.5*(1+tanh(sqrt(2/pi)*(1.044715)))
    assert gelu(np.array(1.0)) == pytest.approx(0.8411919906082768, abs=1e-14)
    x = np.linspace(-3, 3, 13)
    fd = finite_diff_grad(lambda v: float(gelu(v).sum()), x)
    np.testing.assert_allclose(gelu_grad(x), fd, atol=1e-9)


def test_adam_first_step_moves_by_lr():
    # bias correction makes the first step exactly -lr * sign(grad) (up to eps)
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    mom = AdamMoments.zeros_like(p)
    adam_step(p, g, mom, lr=0.1, eps=0.0)
    np.testing.assert_allclose(p, [0.9, -1.9, 0.4], atol=1e-15)
    assert mom.t == 1


def test_adam_zero_lr_is_identity():
    p = np.array([1.0, 2.0])
    adam_step(p, np.array([5.0, -5.0]), AdamMoments.zeros_like(p), lr=0.0)
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_finite_diff_on_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(finite_diff_grad(lambda v: float(v @ v), x), 2 * x, atol=1e-9)


def test_rng_streams_are_deterministic_and_independent():
    a = RngStream(7).child(1, 2).normal((5,))
    b = RngStream(7).child(1, 2).normal((5,))
    c = RngStream(7).child(1, 3).normal((5,))
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    assert np.all(RngStream(0).normal((3,), 0.0) == 0.0)
