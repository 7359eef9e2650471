"""Exceptions raised by mmagg."""

from __future__ import annotations


class MMAggError(Exception):
    """Base exception for mmagg errors."""


class ManifestError(MMAggError):
    """Exception for malformed or inconsistent dataset manifests."""


class FeatureFileError(MMAggError):
    """Exception for unreadable or malformed feature files."""


class PreprocessError(MMAggError):
    """Exception for invalid PCA fitting or quantization input."""


class ShapeError(MMAggError):
    """Exception for tensors whose shapes do not match the model."""


class CheckpointError(MMAggError):
    """Exception for unreadable or malformed checkpoints."""


class TrainingError(MMAggError):
    """Exception for training failures."""


class EvaluationError(MMAggError):
    """Exception for invalid prediction sets or metric input."""


class IntrospectionError(MMAggError):
    """Exception for invalid introspection requests."""


class ConfigError(MMAggError):
    """Exception for invalid run configuration."""


class SynthError(MMAggError):
    """Exception for invalid synthetic dataset specs."""
