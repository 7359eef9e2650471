"""Tests for the fully connected, mixture-of-experts and context-gating head."""

from __future__ import annotations

import math

import numpy as np
import pytest

from mmagg.exceptions import ShapeError
from mmagg.head import (
    HeadParams,
    Prediction,
    bce_grad,
    bce_loss,
    head_backward,
    head_forward,
    head_forward_with_cache,
    init_head_params,
    sigmoid,
)

_FIELDS = ("fc_W", "fc_b", "U", "U_bias", "A", "G", "g")


def _head(rng, input_dim=8, hidden=5, classes=3, experts=2):
    params = init_head_params(input_dim, hidden, classes, experts, rng, np.float64)
    # non-zero biases so their gradients are exercised
    return HeadParams(
        fc_W=params.fc_W,
        fc_b=rng.standard_normal(hidden) * 0.1,
        U=params.U,
        U_bias=rng.standard_normal((classes, experts)) * 0.1,
        A=params.A,
        G=params.G,
        g=rng.standard_normal(classes) * 0.1,
    )


def _reference_forward(params, z):
    """Per-class loops over experts, written without einsum."""
    h = np.maximum(z @ params.fc_W + params.fc_b, 0)
    C, E, _ = params.U.shape
    p = np.zeros(C)
    for c in range(C):
        logits = params.A[c] @ h
        gate = np.exp(logits - logits.max())
        gate /= gate.sum()
        experts = 1 / (1 + np.exp(-(params.U[c] @ h + params.U_bias[c])))
        p[c] = float(gate @ experts)
    context = 1 / (1 + np.exp(-(params.G @ p + params.g)))
    return context * p


def test_forward_matches_reference(rng):
    params = _head(rng)
    codes = [rng.standard_normal(5), rng.standard_normal(3)]
    y = head_forward(params, codes)
    assert y.shape == (3,)
    np.testing.assert_allclose(y, _reference_forward(params, np.concatenate(codes)), rtol=1e-12)
    assert np.all((y >= 0) & (y <= 1))


def test_batched_forward_matches_single(rng):
    params = _head(rng)
    batch = [rng.standard_normal((4, 5)), rng.standard_normal((4, 3))]
    y = head_forward(params, batch)
    assert y.shape == (4, 3)
    for row in range(4):
        np.testing.assert_allclose(y[row], head_forward(params, [batch[0][row], batch[1][row]]), rtol=1e-12)


def test_forward_shape_errors(rng):
    params = _head(rng)
    with pytest.raises(ShapeError):
        head_forward(params, [rng.standard_normal(5)])
    with pytest.raises(ShapeError):
        head_forward(params, [])
    with pytest.raises(ShapeError):
        head_forward(params, [rng.standard_normal((2, 5)), rng.standard_normal((3, 3))])


def test_param_validation(rng):
    params = _head(rng)
    with pytest.raises(ShapeError):
        HeadParams(params.fc_W, params.fc_b, params.U, params.U_bias, params.A, params.G[:2], params.g)
    assert (params.input_dim, params.hidden_size, params.num_classes, params.experts) == (8, 5, 3, 2)


def test_sigmoid_is_stable():
    values = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert values.tolist() == [0.0, 0.5, 1.0]


def test_bce_loss_values():
    assert bce_loss(np.array([0.5]), np.array([1.0])) == pytest.approx(math.log(2))
    assert bce_loss(np.array([[0.5, 0.5]]), np.array([[0.0, 1.0]])) == pytest.approx(math.log(2))
    assert math.isfinite(bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0])))
    with pytest.raises(ShapeError):
        bce_loss(np.array([0.5]), np.array([1.0, 0.0]))


def test_bce_grad_matches_finite_differences(rng):
    y = rng.uniform(0.05, 0.95, size=(2, 3))
    targets = (rng.random((2, 3)) < 0.5).astype(np.float64)
    grad = bce_grad(y, targets)
    step = 1e-6
    for index in np.ndindex(y.shape):
        plus, minus = y.copy(), y.copy()
        plus[index] += step
        minus[index] -= step
        numeric = (bce_loss(plus, targets) - bce_loss(minus, targets)) / (2 * step)
        assert grad[index] == pytest.approx(numeric, rel=1e-5)


def test_gradients_match_finite_differences(rng):
    params = _head(rng)
    codes = [rng.standard_normal(5), rng.standard_normal(3)]
    direction = rng.standard_normal(3)
    _, cache = head_forward_with_cache(params, codes)
    grads, code_grads = head_backward(params, cache, direction)

    arrays = {name: getattr(params, name).copy() for name in _FIELDS}

    def loss():
        return float(direction @ head_forward(HeadParams(**arrays), codes))

    step = 1e-5
    for name in _FIELDS:
        array = arrays[name]
        numeric = np.zeros_like(array)
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + step
            plus = loss()
            array[index] = original - step
            minus = loss()
            array[index] = original
            numeric[index] = (plus - minus) / (2 * step)
        analytic = getattr(grads, name)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        assert np.max(np.abs(analytic - numeric) / scale) < 1e-4, name

    for m, code in enumerate(codes):
        numeric = np.zeros_like(code)
        for j in range(code.size):
            original = code[j]
            code[j] = original + step
            plus = loss()
            code[j] = original - step
            minus = loss()
            code[j] = original
            numeric[j] = (plus - minus) / (2 * step)
        scale = np.maximum(np.maximum(np.abs(code_grads[m]), np.abs(numeric)), 1e-6)
        assert np.max(np.abs(code_grads[m] - numeric) / scale) < 1e-4


def test_duplicate_experts_get_equal_gradients(rng):
    params = _head(rng)
    U, A, U_bias = params.U.copy(), params.A.copy(), params.U_bias.copy()
    U[:, 1], A[:, 1], U_bias[:, 1] = U[:, 0], A[:, 0], U_bias[:, 0]
    params = HeadParams(params.fc_W, params.fc_b, U, U_bias, A, params.G, params.g)
    _, cache = head_forward_with_cache(params, [rng.standard_normal(5), rng.standard_normal(3)])
    grads, _ = head_backward(params, cache, rng.standard_normal(3))
    np.testing.assert_allclose(grads.U[:, 0], grads.U[:, 1], rtol=1e-12)
    np.testing.assert_allclose(grads.A[:, 0], grads.A[:, 1], rtol=1e-12, atol=1e-15)


def test_backward_shape_check(rng):
    params = _head(rng)
    _, cache = head_forward_with_cache(params, [rng.standard_normal(5), rng.standard_normal(3)])
    with pytest.raises(ShapeError):
        head_backward(params, cache, np.ones(4))


def test_prediction_validation():
    pred = Prediction("v", [0.0, 0.5, 1.0])
    assert pred.probs.dtype == np.float64
    with pytest.raises(ShapeError):
        Prediction("v", [0.2, 1.2])
    with pytest.raises(ShapeError):
        Prediction("v", [[0.2]])
