"""Classifier head: fully connected layer, per-class mixture of experts and context gating.

All functions accept a single example (1-D codes) or a batch (N x length codes);
outputs follow the input rank.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from .const import PROB_CLAMP
from .exceptions import ShapeError

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeadParams:
    """FC weights (M x H), expert weights U and gate weights A (C x E x H), context gate G (C x C)."""

    fc_W: np.ndarray
    fc_b: np.ndarray
    U: np.ndarray
    U_bias: np.ndarray
    A: np.ndarray
    G: np.ndarray
    g: np.ndarray

    def __post_init__(self) -> None:
        M, H = self.fc_W.shape
        C, E, H2 = self.U.shape
        if (
            self.fc_b.shape != (H,)
            or H2 != H
            or self.U_bias.shape != (C, E)
            or self.A.shape != (C, E, H)
            or self.G.shape != (C, C)
            or self.g.shape != (C,)
        ):
            raise ShapeError("Inconsistent head parameter shapes")
        if E < 1 or H < 1:
            raise ShapeError("Head needs at least one expert and one hidden unit")

    @property
    def input_dim(self) -> int:
        """Length of the concatenated VLAD code."""
        return self.fc_W.shape[0]

    @property
    def hidden_size(self) -> int:
        """Width of the FC layer."""
        return self.fc_W.shape[1]

    @property
    def num_classes(self) -> int:
        """Number of output classes."""
        return self.U.shape[0]

    @property
    def experts(self) -> int:
        """Experts per class."""
        return self.U.shape[1]

    @property
    def dtype(self) -> np.dtype:
        """Floating dtype of the parameters."""
        return self.fc_W.dtype


@dataclass(frozen=True)
class Prediction:
    """Class probabilities of one video."""

    video_id: str
    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or not np.all((probs >= 0) & (probs <= 1)):
            raise ShapeError(f"Prediction for {self.video_id!r} must be a vector of probabilities in [0, 1]")
        object.__setattr__(self, "probs", probs)


class HeadCache(NamedTuple):
    """Forward intermediates needed by :func:`head_backward`."""

    splits: Tuple[int, ...]
    batched: bool
    z: np.ndarray
    h_pre: np.ndarray
    h: np.ndarray
    gate: np.ndarray
    expert: np.ndarray
    p: np.ndarray
    context: np.ndarray
    y: np.ndarray


class HeadGrads(NamedTuple):
    """Gradients of every head tensor."""

    fc_W: np.ndarray
    fc_b: np.ndarray
    U: np.ndarray
    U_bias: np.ndarray
    A: np.ndarray
    G: np.ndarray
    g: np.ndarray


def init_head_params(
    input_dim: int, hidden_size: int, num_classes: int, experts: int, rng: np.random.Generator, dtype=np.float32
) -> HeadParams:
    """Weights from a normal scaled by 1/sqrt(fan-in), zero biases."""

    def _normal(shape, fan_in):
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)

    return HeadParams(
        fc_W=_normal((input_dim, hidden_size), input_dim),
        fc_b=np.zeros(hidden_size, dtype=dtype),
        U=_normal((num_classes, experts, hidden_size), hidden_size),
        U_bias=np.zeros((num_classes, experts), dtype=dtype),
        A=_normal((num_classes, experts, hidden_size), hidden_size),
        G=_normal((num_classes, num_classes), num_classes),
        g=np.zeros(num_classes, dtype=dtype),
    )


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function written through tanh so it never overflows."""
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax_last(x: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def head_forward_with_cache(params: HeadParams, vlads: Sequence[np.ndarray]) -> Tuple[np.ndarray, HeadCache]:
    """Class probabilities plus forward intermediates."""
    if not vlads:
        raise ShapeError("Head needs at least one modality code")
    codes = [np.asarray(code, dtype=params.dtype) for code in vlads]
    batched = codes[0].ndim == 2
    codes = [np.atleast_2d(code) for code in codes]
    if any(code.shape[0] != codes[0].shape[0] for code in codes):
        raise ShapeError("Modality codes disagree on batch size")
    splits = tuple(code.shape[1] for code in codes)
    z = np.concatenate(codes, axis=1)
    if z.shape[1] != params.input_dim:
        raise ShapeError(f"Concatenated code length {z.shape[1]} != head input {params.input_dim}")

    h_pre = z @ params.fc_W + params.fc_b
    h = np.maximum(h_pre, 0)
    gate = _softmax_last(np.einsum("ceh,nh->nce", params.A, h))
    expert = sigmoid(np.einsum("ceh,nh->nce", params.U, h) + params.U_bias)
    p = np.sum(gate * expert, axis=2)
    context = sigmoid(p @ params.G.T + params.g)
    y = context * p

    cache = HeadCache(splits, batched, z, h_pre, h, gate, expert, p, context, y)
    return (y if batched else y[0]), cache


def head_forward(params: HeadParams, vlads: Sequence[np.ndarray]) -> np.ndarray:
    """y = sigmoid(G p + g) * p where p_c is the gate-weighted mixture of sigmoid experts."""
    return head_forward_with_cache(params, vlads)[0]


def bce_loss(y: np.ndarray, targets: np.ndarray) -> float:
    """Binary cross-entropy averaged over classes (and over the batch for N x C input)."""
    y = np.clip(np.asarray(y, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    targets = np.asarray(targets, dtype=np.float64)
    if y.shape != targets.shape:
        raise ShapeError(f"Prediction shape {y.shape} != target shape {targets.shape}")
    terms = targets * np.log(y) + (1.0 - targets) * np.log(1.0 - y)
    return float(-np.mean(terms))


def bce_grad(y: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of :func:`bce_loss` with respect to the unclamped predictions."""
    y = np.asarray(y)
    targets = np.asarray(targets, dtype=y.dtype)
    clamped = np.clip(y, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (y >= PROB_CLAMP) & (y <= 1.0 - PROB_CLAMP)
    grad = (clamped - targets) / (clamped * (1.0 - clamped)) / y.size
    return np.where(inside, grad, 0.0).astype(y.dtype)


def head_backward(params: HeadParams, cache: HeadCache, grad_y: np.ndarray) -> Tuple[HeadGrads, List[np.ndarray]]:
    """Exact gradients of :func:`head_forward`: parameter gradients and per-modality code gradients."""
    grad_y = np.atleast_2d(np.asarray(grad_y, dtype=params.dtype))
    if grad_y.shape != cache.y.shape:
        raise ShapeError(f"Gradient shape {grad_y.shape} != output shape {cache.y.shape}")

    context = cache.context
    grad_q = grad_y * cache.p * context * (1.0 - context)
    grad_p = grad_y * context + grad_q @ params.G
    grad_G = grad_q.T @ cache.p
    grad_g = grad_q.sum(axis=0)

    grad_gate = grad_p[:, :, None] * cache.expert
    grad_expert = grad_p[:, :, None] * cache.gate
    grad_gate_logits = cache.gate * (grad_gate - np.sum(grad_gate * cache.gate, axis=2, keepdims=True))
    grad_expert_logits = grad_expert * cache.expert * (1.0 - cache.expert)

    grad_A = np.einsum("nce,nh->ceh", grad_gate_logits, cache.h)
    grad_U = np.einsum("nce,nh->ceh", grad_expert_logits, cache.h)
    grad_U_bias = grad_expert_logits.sum(axis=0)
    grad_h = np.einsum("nce,ceh->nh", grad_gate_logits, params.A) + np.einsum(
        "nce,ceh->nh", grad_expert_logits, params.U
    )

    grad_h_pre = grad_h * (cache.h_pre > 0)
    grad_fc_W = cache.z.T @ grad_h_pre
    grad_fc_b = grad_h_pre.sum(axis=0)
    grad_z = grad_h_pre @ params.fc_W.T

    bounds = np.cumsum((0,) + cache.splits)
    grad_codes = [grad_z[:, start:stop] for start, stop in zip(bounds[:-1], bounds[1:])]
    if not cache.batched:
        grad_codes = [grad[0] for grad in grad_codes]

    grads = HeadGrads(
        fc_W=grad_fc_W,
        fc_b=grad_fc_b,
        U=grad_U,
        U_bias=grad_U_bias,
        A=grad_A,
        G=grad_G,
        g=grad_g,
    )
    return grads, grad_codes
