"""PCA, whitening, clipping and 8-bit quantization of modality features."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .checkpoint import read_tensors, write_tensors
from .const import (
    DEFAULT_CLIP_BOUND,
    DEFAULT_LEVELS,
    DEFAULT_PCA_MAX_FRAMES,
    DEFAULT_WHITEN_EPS,
    ORTHONORMAL_TOLERANCE,
)
from .exceptions import CheckpointError, PreprocessError

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocessModel:
    """Fitted PCA basis plus whitening, clipping and quantization parameters."""

    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    whiten_eps: float = DEFAULT_WHITEN_EPS
    clip_bound: float = DEFAULT_CLIP_BOUND
    levels: int = DEFAULT_LEVELS

    def __post_init__(self) -> None:
        if self.basis.ndim != 2 or self.mean.shape != (self.basis.shape[0],):
            raise PreprocessError(f"Inconsistent PCA shapes: mean {self.mean.shape}, basis {self.basis.shape}")
        if self.eigenvalues.shape != (self.basis.shape[1],):
            raise PreprocessError(f"Expected {self.basis.shape[1]} eigenvalues, got {self.eigenvalues.shape}")
        if self.basis.shape[1] > self.basis.shape[0]:
            raise PreprocessError("Target dimension exceeds input dimension")
        if np.any(self.eigenvalues < 0) or np.any(np.diff(self.eigenvalues) > 0):
            raise PreprocessError("Eigenvalues must be non-negative and sorted non-increasing")
        if self.whiten_eps <= 0 or self.clip_bound <= 0 or self.levels < 2:
            raise PreprocessError("whiten_eps and clip_bound must be positive and levels >= 2")
        gram = self.basis.T @ self.basis
        if not np.allclose(gram, np.eye(gram.shape[0]), rtol=0.0, atol=ORTHONORMAL_TOLERANCE):
            raise PreprocessError("PCA basis columns are not orthonormal")

    @property
    def input_dim(self) -> int:
        """Input feature dimension."""
        return self.basis.shape[0]

    @property
    def output_dim(self) -> int:
        """Output dimension after projection."""
        return self.basis.shape[1]


def fit_pca(
    samples: np.ndarray,
    target_dim: int,
    *,
    whiten_eps: float = DEFAULT_WHITEN_EPS,
    clip_bound: float = DEFAULT_CLIP_BOUND,
    levels: int = DEFAULT_LEVELS,
) -> PreprocessModel:
    """Fit PCA on an N x D sample matrix by eigendecomposition of its covariance.

    The covariance uses divisor N - 1. Components are sorted by descending
    eigenvalue and each eigenvector's largest-magnitude entry is made positive.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise PreprocessError(f"Expected an N x D sample matrix, got shape {samples.shape}")
    count, dim = samples.shape
    if count < 2:
        raise PreprocessError(f"PCA needs at least 2 samples, got {count}")
    if not 1 <= target_dim <= min(count - 1, dim):
        raise PreprocessError(f"Target dimension {target_dim} outside [1, {min(count - 1, dim)}]")
    if not np.all(np.isfinite(samples)):
        raise PreprocessError("PCA samples contain non-finite values")

    mean = samples.mean(axis=0)
    centered = samples - mean
    covariance = centered.T @ centered / (count - 1)
    covariance = (covariance + covariance.T) / 2

    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues, kind="stable")[::-1][:target_dim]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    basis = eigenvectors[:, order]

    # sign convention: largest-magnitude entry of each eigenvector is positive
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(target_dim)])
    signs[signs == 0] = 1.0
    basis = basis * signs

    # eigh may return ties in either order; enforce the non-increasing invariant exactly
    eigenvalues = np.minimum.accumulate(eigenvalues)

    _LOGGER.debug("Fitted PCA %d -> %d on %d samples (top eigenvalue %.4g)", dim, target_dim, count, eigenvalues[0])
    return PreprocessModel(
        mean=mean,
        basis=basis,
        eigenvalues=eigenvalues,
        whiten_eps=whiten_eps,
        clip_bound=clip_bound,
        levels=levels,
    )


def subsample_frames(frames: np.ndarray, max_frames: int = DEFAULT_PCA_MAX_FRAMES, seed: int = 0) -> np.ndarray:
    """Return at most ``max_frames`` rows drawn uniformly without replacement, in original order."""
    frames = np.asarray(frames)
    if frames.shape[0] <= max_frames:
        return frames
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = np.sort(rng.choice(frames.shape[0], size=max_frames, replace=False))
    return frames[keep]


def project(model: PreprocessModel, x: np.ndarray) -> np.ndarray:
    """Return centered, projected and whitened values before clipping.

    Accepts a single D-vector or an N x D matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise PreprocessError(f"Expected input dimension {model.input_dim}, got {x.shape[-1]}")
    return (x - model.mean) @ model.basis / np.sqrt(model.eigenvalues + model.whiten_eps)


def transform(model: PreprocessModel, x: np.ndarray) -> np.ndarray:
    """Project, whiten and clip ``x`` into [-B, B]."""
    return np.clip(project(model, x), -model.clip_bound, model.clip_bound)


def quantize(y: np.ndarray, clip_bound: float = DEFAULT_CLIP_BOUND, levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """Map values to integer codes in [0, levels - 1], rounding half away from zero."""
    if clip_bound <= 0:
        raise PreprocessError(f"Clip bound must be positive, got {clip_bound}")
    if not 2 <= levels <= 256:
        raise PreprocessError(f"Levels must be within [2, 256], got {levels}")
    clipped = np.clip(np.asarray(y, dtype=np.float64), -clip_bound, clip_bound)
    scaled = (clipped + clip_bound) / (2 * clip_bound) * (levels - 1)
    # scaled is non-negative, so half-away-from-zero is floor(x + 0.5)
    return np.floor(scaled + 0.5).astype(np.uint8)


def dequantize(codes: np.ndarray, clip_bound: float = DEFAULT_CLIP_BOUND, levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """Reconstruct values from codes: code / (levels - 1) * 2B - B."""
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > levels - 1):
        raise PreprocessError(f"Quantization codes outside [0, {levels - 1}]")
    return codes.astype(np.float64) / (levels - 1) * (2 * clip_bound) - clip_bound


def save_preprocess_model(model: PreprocessModel, path: Union[str, Path]) -> str:
    """Persist a PreprocessModel in the tensor-table format."""
    tensors = {
        "mean": model.mean.astype(np.float64),
        "basis": model.basis.astype(np.float64),
        "eigenvalues": model.eigenvalues.astype(np.float64),
        "whiten_eps": np.array([model.whiten_eps], dtype=np.float64),
        "clip_bound": np.array([model.clip_bound], dtype=np.float64),
        "levels": np.array([model.levels], dtype=np.float64),
    }
    return write_tensors(path, tensors)


def load_preprocess_model(path: Union[str, Path]) -> PreprocessModel:
    """Load a PreprocessModel written by :func:`save_preprocess_model`."""
    tensors = read_tensors(path)
    try:
        return PreprocessModel(
            mean=tensors["mean"],
            basis=tensors["basis"],
            eigenvalues=tensors["eigenvalues"],
            whiten_eps=float(tensors["whiten_eps"][0]),
            clip_bound=float(tensors["clip_bound"][0]),
            levels=int(tensors["levels"][0]),
        )
    except KeyError as err:
        raise CheckpointError(f"Preprocess model {path} is missing tensor {err}") from err


def fit_from_sequences(
    sequences, target_dim: int, *, max_frames: int = DEFAULT_PCA_MAX_FRAMES, seed: int = 0, **kwargs
) -> PreprocessModel:
    """Fit PCA on the stacked rows of several feature sequences, subsampled to ``max_frames``."""
    blocks = [seq.data for seq in sequences if seq.count]
    if not blocks:
        raise PreprocessError("No frames available to fit PCA")
    frames = subsample_frames(np.vstack(blocks), max_frames=max_frames, seed=seed)
    _LOGGER.info("Fitting PCA on %d frames (dim %d -> %d)", frames.shape[0], frames.shape[1], target_dim)
    return fit_pca(frames, target_dim, **kwargs)
