"""Adam optimizer, mini-batch training loop and finite-difference gradient checker."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from .const import (
    DEFAULT_ADAM_EPS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BETA1,
    DEFAULT_BETA2,
    DEFAULT_EPOCHS,
    DEFAULT_LR,
    DEFAULT_SEED,
    DEFAULT_THREADS,
    GRADCHECK_FLOOR,
    GRADCHECK_STEP,
    GRADCHECK_TOLERANCE,
    SPLIT_TRAIN,
)
from .datastore import Dataset, load_video_features
from .exceptions import MMAggError, TrainingError
from .model import OPTIMIZER_PREFIX, AggregationModel, batch_loss, batch_loss_and_grads
from .sampling import sample_segment, seed_for, video_segments

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamHyperparams:
    """Adam learning rate, moment decays and epsilon."""

    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_ADAM_EPS

    def __post_init__(self) -> None:
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise TrainingError(f"Invalid optimizer hyperparameters {self}")


@dataclass(frozen=True)
class OptimizerState:
    """Step count and first/second moments mirroring every parameter tensor."""

    step: int
    m: Mapping[str, np.ndarray]
    v: Mapping[str, np.ndarray]
    hyper: AdamHyperparams = field(default_factory=AdamHyperparams)

    def to_tensors(self) -> Dict[str, np.ndarray]:
        """Checkpoint tensors: adam.m.<name>, adam.v.<name>, then adam.step and adam.hyper."""
        tensors: Dict[str, np.ndarray] = {}
        for name, moment in self.m.items():
            tensors[f"{OPTIMIZER_PREFIX}m.{name}"] = moment
        for name, moment in self.v.items():
            tensors[f"{OPTIMIZER_PREFIX}v.{name}"] = moment
        tensors[f"{OPTIMIZER_PREFIX}step"] = np.array([self.step], dtype=np.float64)
        hyper = self.hyper
        tensors[f"{OPTIMIZER_PREFIX}hyper"] = np.array([hyper.lr, hyper.beta1, hyper.beta2, hyper.eps])
        return tensors

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray]) -> "OptimizerState":
        """Rebuild the state from checkpoint tensors."""
        try:
            step = int(tensors[f"{OPTIMIZER_PREFIX}step"][0])
            lr, beta1, beta2, eps = (float(value) for value in tensors[f"{OPTIMIZER_PREFIX}hyper"])
        except (KeyError, ValueError) as err:
            raise TrainingError(f"Optimizer tensors incomplete: {err}") from err
        m = {name[len("adam.m.") :]: tensor for name, tensor in tensors.items() if name.startswith("adam.m.")}
        v = {name[len("adam.v.") :]: tensor for name, tensor in tensors.items() if name.startswith("adam.v.")}
        return cls(step, m, v, AdamHyperparams(lr, beta1, beta2, eps))


def init_optimizer(params: Mapping[str, np.ndarray], hyper: Optional[AdamHyperparams] = None) -> OptimizerState:
    """Fresh state with zero moments."""
    m = {name: np.zeros_like(tensor) for name, tensor in params.items()}
    v = {name: np.zeros_like(tensor) for name, tensor in params.items()}
    return OptimizerState(0, m, v, hyper or AdamHyperparams())


def adam_step(
    state: OptimizerState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]
) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """Bias-corrected adaptive-moment update of every tensor.

    A non-finite gradient skips the whole step: parameters and state are returned unchanged.
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise TrainingError("Parameter, gradient and optimizer tensor names differ")
    for name, tensor in params.items():
        if grads[name].shape != tensor.shape or state.m[name].shape != tensor.shape:
            raise TrainingError(f"Shape mismatch for {name!r}: {tensor.shape} vs {grads[name].shape}")

    bad = [name for name, grad in grads.items() if not np.all(np.isfinite(grad))]
    if bad:
        _LOGGER.warning("Skipping optimizer step %d: non-finite gradients in %s", state.step + 1, ", ".join(bad))
        return dict(params), state

    hyper = state.hyper
    step = state.step + 1
    correction1 = 1.0 - hyper.beta1**step
    correction2 = 1.0 - hyper.beta2**step
    updated, m, v = {}, {}, {}
    for name, tensor in params.items():
        grad = grads[name].astype(tensor.dtype, copy=False)
        m[name] = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * grad
        v[name] = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * grad * grad
        if hyper.lr == 0:
            updated[name] = tensor
            continue
        m_hat = m[name] / correction1
        v_hat = v[name] / correction2
        updated[name] = (tensor - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)).astype(tensor.dtype, copy=False)
    return updated, OptimizerState(step, m, v, hyper)


class TrainResult(NamedTuple):
    """Trained model, final optimizer state and the mean loss of every epoch."""

    model: AggregationModel
    optimizer: OptimizerState
    losses: List[float]


def _multi_hot(labels, num_classes: int) -> np.ndarray:
    """Target vector with ones at the label indices."""
    target = np.zeros(num_classes)
    target[sorted(labels)] = 1.0
    return target


def train(
    model: AggregationModel,
    dataset: Dataset,
    epochs: int = DEFAULT_EPOCHS,
    batch_size: int = DEFAULT_BATCH_SIZE,
    seed: int = DEFAULT_SEED,
    *,
    hyper: Optional[AdamHyperparams] = None,
    optimizer: Optional[OptimizerState] = None,
    split: str = SPLIT_TRAIN,
    threads: int = DEFAULT_THREADS,
) -> TrainResult:
    """Train on every segment of the split's videos; one example per segment.

    Shuffling uses a per-epoch stream of ``seed``; each segment's frames are
    drawn from seed_for(seed, video, segment, epoch). Returns the mean loss of
    every epoch.
    """
    if epochs < 0 or batch_size < 1 or threads < 1:
        raise TrainingError("epochs must be >= 0, batch_size and threads >= 1")
    records = dataset.split(split)
    if not records:
        raise TrainingError(f"No videos in split {split!r}")
    if dataset.num_classes != model.num_classes:
        raise TrainingError(f"Dataset has {dataset.num_classes} classes, model {model.num_classes}")
    for spec in model.modalities:
        if dataset.modality(spec.name).dim != spec.dim:
            raise TrainingError(f"Modality {spec.name!r} dim differs between dataset and model")

    features = {record.id: load_video_features(record, model.modalities) for record in records}
    examples = [
        (record, segment)
        for record in records
        for segment in video_segments(record, features[record.id], model.modalities)
    ]
    targets = np.stack([_multi_hot(record.labels, model.num_classes) for record, _ in examples])
    _LOGGER.info("Training on %d segments from %d videos for %d epochs", len(examples), len(records), epochs)

    params = model.parameters()
    state = optimizer or init_optimizer(params, hyper)
    losses: List[float] = []
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    map_fn = executor.map if executor is not None else map
    try:
        for epoch in range(epochs):
            shuffle = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))
            order = shuffle.permutation(len(examples))
            total = 0.0
            for start in range(0, len(order), batch_size):
                batch = order[start : start + batch_size]

                def _sample(index, epoch=epoch):
                    record, segment = examples[index]
                    rng = seed_for(seed, record.id, segment.index, epoch)
                    return sample_segment(
                        segment, features[record.id], model.modalities, model.sample_size, rng
                    ).inputs

                inputs = list(map_fn(_sample, batch))
                result = batch_loss_and_grads(model, inputs, targets[batch], map_fn)
                params, state = adam_step(state, params, result.grads)
                model = model.with_parameters(params)
                total += result.loss * len(batch)
                _LOGGER.debug("Epoch %d batch at %d: loss %.6f", epoch + 1, start, result.loss)

            if not all(np.all(np.isfinite(tensor)) for tensor in params.values()):
                raise TrainingError(f"Parameters became non-finite in epoch {epoch + 1}")
            losses.append(total / len(examples))
            _LOGGER.info("Epoch %d/%d: mean loss %.6f", epoch + 1, epochs, losses[-1])
    finally:
        if executor is not None:
            executor.shutdown()
    return TrainResult(model, state, losses)


class GradCheckSample(NamedTuple):
    """One example: S x d_m inputs per modality and its C-length target vector."""

    inputs: Dict[str, np.ndarray]
    targets: np.ndarray


@dataclass(frozen=True)
class GradCheckEntry:
    """Relative error of one tensor against its finite differences."""

    name: str
    max_rel_error: float
    passed: bool


@dataclass(frozen=True)
class GradCheckReport:
    """Per-tensor maximum relative error between analytic and central-difference gradients."""

    entries: Tuple[GradCheckEntry, ...]
    step: float
    tolerance: float

    @property
    def passed(self) -> bool:
        """True when every entry is within tolerance."""
        return all(entry.passed for entry in self.entries)

    @property
    def max_rel_error(self) -> float:
        """Largest relative error over all entries."""
        return max((entry.max_rel_error for entry in self.entries), default=0.0)

    def failures(self) -> List[str]:
        """Names of the entries over tolerance."""
        return [entry.name for entry in self.entries if not entry.passed]


def make_gradcheck_sample(model: AggregationModel, seed: int = DEFAULT_SEED, zero: bool = False) -> GradCheckSample:
    """Random (or all-zero) 64-bit inputs of the model's sample size and a multi-hot target."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    inputs = {}
    for spec in model.modalities:
        shape = (model.sample_size, spec.dim)
        inputs[spec.name] = np.zeros(shape) if zero else rng.standard_normal(shape)
    targets = (rng.random(model.num_classes) < 0.4).astype(np.float64)
    targets[rng.integers(model.num_classes)] = 1.0
    return GradCheckSample(inputs, targets)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise relative error, with a floor on the denominator."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GRADCHECK_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


def gradient_check(
    model: AggregationModel,
    sample: GradCheckSample,
    step: float = GRADCHECK_STEP,
    tolerance: float = GRADCHECK_TOLERANCE,
) -> GradCheckReport:
    """Compare analytic gradients with central differences for every tensor and every modality input.

    Runs in 64-bit precision. Never raises on a mismatch; failing tensors are
    flagged in the report.
    """
    model = model.astype(np.float64)
    inputs = {name: np.asarray(array, dtype=np.float64) for name, array in sample.inputs.items()}
    targets = np.asarray(sample.targets, dtype=np.float64)[None, :]
    analytic = batch_loss_and_grads(model, [inputs], targets)

    def _loss(candidate_model, candidate_inputs) -> float:
        try:
            return batch_loss(candidate_model, [candidate_inputs], targets)
        except (MMAggError, FloatingPointError):
            return float("nan")

    entries: List[GradCheckEntry] = []
    params = model.parameters()
    for name, tensor in params.items():
        numeric = np.zeros_like(tensor)
        for index in np.ndindex(tensor.shape):
            shifted = {key: value.copy() if key == name else value for key, value in params.items()}
            shifted[name][index] = tensor[index] + step
            plus = _loss(model.with_parameters(shifted), inputs)
            shifted[name][index] = tensor[index] - step
            minus = _loss(model.with_parameters(shifted), inputs)
            numeric[index] = (plus - minus) / (2 * step)
        entries.append(_entry(name, analytic.grads[name], numeric, tolerance))

    for modality, array in inputs.items():
        numeric = np.zeros_like(array)
        for index in np.ndindex(array.shape):
            shifted_inputs = dict(inputs)
            shifted_inputs[modality] = array.copy()
            shifted_inputs[modality][index] = array[index] + step
            plus = _loss(model, shifted_inputs)
            shifted_inputs[modality][index] = array[index] - step
            minus = _loss(model, shifted_inputs)
            numeric[index] = (plus - minus) / (2 * step)
        entries.append(_entry(f"input.{modality}", analytic.input_grads[0][modality], numeric, tolerance))

    report = GradCheckReport(tuple(entries), step, tolerance)
    if report.passed:
        _LOGGER.info("Gradient check passed: max relative error %.3g", report.max_rel_error)
    else:
        _LOGGER.warning("Gradient check failed for %s", ", ".join(report.failures()))
    return report


def _entry(name: str, analytic: np.ndarray, numeric: np.ndarray, tolerance: float) -> GradCheckEntry:
    """Report entry for one tensor."""
    if not np.all(np.isfinite(analytic)) or not np.all(np.isfinite(numeric)):
        return GradCheckEntry(name, float("inf"), False)
    error = _relative_error(analytic, numeric)
    return GradCheckEntry(name, error, error < tolerance)
