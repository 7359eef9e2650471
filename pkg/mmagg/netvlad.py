"""Learnable VLAD pooling: soft assignment, residual accumulation and normalization.

Shapes: X is S x d (frames x feature dim), W and C are d x K, b is K. The
pooled code V is flattened clusters-outer, dimensions-inner, so V[k * d + j]
holds the residual sum of dimension j for cluster k.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

from .const import DEFAULT_NORM_EPS
from .exceptions import ShapeError

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class VladParams:
    """Assignment weights, assignment bias and cluster centers of one modality."""

    W: np.ndarray
    b: np.ndarray
    C: np.ndarray
    norm_eps: float = DEFAULT_NORM_EPS

    def __post_init__(self) -> None:
        if self.W.ndim != 2 or self.C.shape != self.W.shape or self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"Inconsistent VLAD shapes: W {self.W.shape}, b {self.b.shape}, C {self.C.shape}")

    @property
    def dim(self) -> int:
        """Feature dimension D."""
        return self.W.shape[0]

    @property
    def clusters(self) -> int:
        """Cluster count K."""
        return self.W.shape[1]

    @property
    def output_dim(self) -> int:
        """Length of the VLAD code, D * K."""
        return self.dim * self.clusters

    @property
    def dtype(self) -> np.dtype:
        """Floating dtype of the parameters."""
        return self.W.dtype


class VladCache(NamedTuple):
    """Forward intermediates needed by :func:`vlad_backward`."""

    order: np.ndarray
    inputs: np.ndarray
    alpha: np.ndarray
    mass: np.ndarray
    residuals: np.ndarray
    col_norm: np.ndarray
    intra: np.ndarray
    global_norm: float
    code: np.ndarray


class VladGrads(NamedTuple):
    """Gradients of W, b, C and the input frames."""

    W: np.ndarray
    b: np.ndarray
    C: np.ndarray
    X: np.ndarray


def init_vlad_params(
    dim: int, clusters: int, rng: np.random.Generator, dtype=np.float32, norm_eps: float = DEFAULT_NORM_EPS
) -> VladParams:
    """Centers and assignment weights from a normal scaled by 1/sqrt(d), zero bias."""
    scale = 1.0 / np.sqrt(dim)
    centers = rng.standard_normal((dim, clusters)) * scale
    weights = rng.standard_normal((dim, clusters)) * scale
    return VladParams(
        W=weights.astype(dtype),
        b=np.zeros(clusters, dtype=dtype),
        C=centers.astype(dtype),
        norm_eps=norm_eps,
    )


def _check_inputs(params: VladParams, X: np.ndarray) -> np.ndarray:
    """Input as an S x D array in the parameter dtype, rejecting other shapes."""
    X = np.asarray(X, dtype=params.dtype)
    if X.ndim != 2 or X.shape[1] != params.dim:
        raise ShapeError(f"Expected S x {params.dim} input, got shape {X.shape}")
    if X.shape[0] < 1:
        raise ShapeError("VLAD needs at least one frame")
    return X


def canonical_order(X: np.ndarray) -> np.ndarray:
    """Row order that sorts frames lexicographically by value.

    Summing in this order makes the pooled code bit-identical under any
    permutation of the input rows.
    """
    return np.lexsort(X.T[::-1])


def soft_assign(params: VladParams, X: np.ndarray) -> np.ndarray:
    """Per-frame softmax over clusters of X @ W + b (S x K)."""
    X = _check_inputs(params, X)
    logits = X @ params.W + params.b
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)


def vlad_residuals(params: VladParams, X: np.ndarray) -> np.ndarray:
    """Un-normalized d x K residual sums: sum_i alpha[i, k] * (X[i, j] - C[j, k])."""
    return vlad_forward_with_cache(params, X)[1].residuals


def vlad_forward_with_cache(params: VladParams, X: np.ndarray) -> Tuple[np.ndarray, VladCache]:
    """Pooled Kd code plus the intermediates of the forward pass."""
    X = _check_inputs(params, X)
    order = canonical_order(X)
    inputs = X[order]
    alpha = soft_assign(params, inputs)
    mass = alpha.sum(axis=0)
    residuals = inputs.T @ alpha - params.C * mass

    eps = params.norm_eps
    col_norm = np.sqrt(np.sum(residuals * residuals, axis=0))
    intra = residuals / np.maximum(col_norm, eps)
    global_norm = float(np.sqrt(np.sum(intra * intra)))
    normalized = intra / max(global_norm, eps)
    code = np.ascontiguousarray(normalized.T).reshape(-1)

    cache = VladCache(order, inputs, alpha, mass, residuals, col_norm, intra, global_norm, normalized)
    return code, cache


def vlad_forward(params: VladParams, X: np.ndarray) -> np.ndarray:
    """Soft-assigned residual pooling with intra-normalization then global L2 normalization."""
    return vlad_forward_with_cache(params, X)[0]


def vlad_backward(
    params: VladParams, X: np.ndarray, grad_V: np.ndarray, cache: Optional[VladCache] = None
) -> VladGrads:
    """Exact gradients of :func:`vlad_forward` with respect to W, b, C and X."""
    if cache is None:
        _, cache = vlad_forward_with_cache(params, X)
    grad_V = np.asarray(grad_V, dtype=params.dtype)
    if grad_V.shape != (params.output_dim,):
        raise ShapeError(f"Expected gradient of length {params.output_dim}, got shape {grad_V.shape}")
    eps = params.norm_eps
    K, d = params.clusters, params.dim

    grad_norm = grad_V.reshape(K, d).T
    normalized = cache.code
    if cache.global_norm > eps:
        grad_intra = (grad_norm - normalized * np.sum(normalized * grad_norm)) / cache.global_norm
    else:
        grad_intra = grad_norm / eps

    above = cache.col_norm > eps
    dots = np.sum(cache.intra * grad_intra, axis=0)
    safe_norm = np.where(above, cache.col_norm, 1.0)
    grad_res = np.where(above, (grad_intra - cache.intra * dots) / safe_norm, grad_intra / eps)

    grad_C = -grad_res * cache.mass
    grad_alpha = cache.inputs @ grad_res - np.sum(grad_res * params.C, axis=0)
    grad_logits = cache.alpha * (grad_alpha - np.sum(grad_alpha * cache.alpha, axis=1, keepdims=True))

    grad_W = cache.inputs.T @ grad_logits
    grad_b = grad_logits.sum(axis=0)
    grad_sorted = cache.alpha @ grad_res.T + grad_logits @ params.W.T

    grad_X = np.empty_like(grad_sorted)
    grad_X[cache.order] = grad_sorted
    return VladGrads(W=grad_W, b=grad_b, C=grad_C, X=grad_X)
