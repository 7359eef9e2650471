"""Full aggregation model: per-modality VLAD pooling feeding the classifier head."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import read_tensors, write_tensors
from .const import DEFAULT_EXPERTS, DEFAULT_HIDDEN_SIZE, DEFAULT_NORM_EPS, DEFAULT_SAMPLE_SIZE, DEFAULT_SEED
from .datastore import ModalitySpec
from .exceptions import CheckpointError, ShapeError
from .head import HeadParams, bce_grad, bce_loss, head_backward, head_forward, head_forward_with_cache, init_head_params
from .netvlad import VladParams, init_vlad_params, vlad_backward, vlad_forward, vlad_forward_with_cache

_LOGGER = logging.getLogger(__name__)

PathLike = Union[str, Path]
MapFn = Callable[[Callable, Iterable], Iterable]

CONFIG_TENSOR = "meta.config"
OPTIMIZER_PREFIX = "adam."

_HEAD_FIELDS = (
    ("fc.W", "fc_W"),
    ("fc.b", "fc_b"),
    ("moe.U", "U"),
    ("moe.bias", "U_bias"),
    ("moe.A", "A"),
    ("cg.G", "G"),
    ("cg.g", "g"),
)


@dataclass(frozen=True)
class AggregationModel:
    """VLAD parameters per modality (in manifest order), head parameters and a config snapshot."""

    modalities: Tuple[ModalitySpec, ...]
    num_classes: int
    vlad: Mapping[str, VladParams]
    head: HeadParams
    config: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        names = [spec.name for spec in self.modalities]
        if list(self.vlad) != names:
            raise ShapeError(f"VLAD parameters {list(self.vlad)} do not follow modality order {names}")
        for spec in self.modalities:
            params = self.vlad[spec.name]
            if params.dim != spec.dim or params.clusters != spec.clusters:
                raise ShapeError(
                    f"Modality {spec.name!r}: VLAD shape {params.dim}x{params.clusters} "
                    f"!= spec {spec.dim}x{spec.clusters}"
                )
        code_length = sum(params.output_dim for params in self.vlad.values())
        if self.head.input_dim != code_length or self.head.num_classes != self.num_classes:
            raise ShapeError("Head dimensions do not match the VLAD codes or the class count")

    @property
    def modality_names(self) -> List[str]:
        """Modality names in canonical order."""
        return [spec.name for spec in self.modalities]

    @property
    def sample_size(self) -> int:
        """Frames sampled per modality and segment."""
        return int(self.config.get("sample_size", DEFAULT_SAMPLE_SIZE))

    @property
    def dtype(self) -> np.dtype:
        """Floating dtype of the parameters."""
        return self.head.dtype

    def code_slices(self) -> Dict[str, slice]:
        """Position of each modality's VLAD code inside the concatenated head input."""
        slices, start = {}, 0
        for name, params in self.vlad.items():
            slices[name] = slice(start, start + params.output_dim)
            start += params.output_dim
        return slices

    def parameters(self) -> Dict[str, np.ndarray]:
        """All trainable tensors in canonical order."""
        tensors: Dict[str, np.ndarray] = {}
        for name, params in self.vlad.items():
            tensors[f"vlad.{name}.W"] = params.W
            tensors[f"vlad.{name}.b"] = params.b
            tensors[f"vlad.{name}.C"] = params.C
        for key, attr in _HEAD_FIELDS:
            tensors[f"head.{key}"] = getattr(self.head, attr)
        return tensors

    def with_parameters(self, tensors: Mapping[str, np.ndarray]) -> "AggregationModel":
        """Copy of the model with its tensors replaced by ``tensors`` (same names, same shapes)."""
        current = self.parameters()
        missing = [name for name in current if name not in tensors]
        if missing:
            raise ShapeError(f"Missing parameter tensors: {missing}")
        for name, tensor in current.items():
            if np.shape(tensors[name]) != tensor.shape:
                raise ShapeError(f"Tensor {name!r} has shape {np.shape(tensors[name])}, expected {tensor.shape}")
        vlad = {
            name: VladParams(
                W=np.asarray(tensors[f"vlad.{name}.W"]),
                b=np.asarray(tensors[f"vlad.{name}.b"]),
                C=np.asarray(tensors[f"vlad.{name}.C"]),
                norm_eps=params.norm_eps,
            )
            for name, params in self.vlad.items()
        }
        head = HeadParams(**{attr: np.asarray(tensors[f"head.{key}"]) for key, attr in _HEAD_FIELDS})
        return AggregationModel(self.modalities, self.num_classes, vlad, head, dict(self.config))

    def astype(self, dtype) -> "AggregationModel":
        """Copy with every parameter cast to ``dtype``."""
        return self.with_parameters({name: tensor.astype(dtype) for name, tensor in self.parameters().items()})

    def forward(self, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
        """Class probabilities for one example given S x d_m inputs per modality."""
        codes = [vlad_forward(self.vlad[name], inputs[name]) for name in self.vlad]
        return head_forward(self.head, codes)

    def predict(self, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
        """Forward pass returned as a 64-bit vector."""
        return np.asarray(self.forward(inputs), dtype=np.float64)


def init_model(
    modalities: Sequence[ModalitySpec],
    num_classes: int,
    *,
    hidden_size: int = DEFAULT_HIDDEN_SIZE,
    experts: int = DEFAULT_EXPERTS,
    sample_size: int = DEFAULT_SAMPLE_SIZE,
    seed: int = DEFAULT_SEED,
    dtype=np.float32,
    norm_eps: float = DEFAULT_NORM_EPS,
) -> AggregationModel:
    """Seeded initialization; VLAD tensors first, in modality order, then the head."""
    if not modalities:
        raise ShapeError("A model needs at least one modality")
    if num_classes < 1 or hidden_size < 1 or experts < 1 or sample_size < 1:
        raise ShapeError("num_classes, hidden_size, experts and sample_size must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    vlad = {spec.name: init_vlad_params(spec.dim, spec.clusters, rng, dtype, norm_eps) for spec in modalities}
    code_length = sum(params.output_dim for params in vlad.values())
    head = init_head_params(code_length, hidden_size, num_classes, experts, rng, dtype)
    config = {
        "modalities": [spec.to_dict() for spec in modalities],
        "num_classes": num_classes,
        "hidden_size": hidden_size,
        "experts": experts,
        "sample_size": sample_size,
        "seed": seed,
        "norm_eps": norm_eps,
    }
    _LOGGER.debug("Initialized model: %d modalities, code length %d, %d classes", len(vlad), code_length, num_classes)
    return AggregationModel(tuple(modalities), num_classes, vlad, head, config)


class BatchResult(NamedTuple):
    """Mean batch loss, parameter gradients and per-example input gradients."""

    loss: float
    grads: Dict[str, np.ndarray]
    input_grads: List[Dict[str, np.ndarray]]


def batch_loss(model: AggregationModel, examples: Sequence[Mapping[str, np.ndarray]], targets: np.ndarray) -> float:
    """Mean binary cross-entropy of a batch of sampled examples."""
    codes = [[vlad_forward(model.vlad[name], example[name]) for example in examples] for name in model.vlad]
    y = head_forward(model.head, [np.stack(batch) for batch in codes])
    return bce_loss(y, targets)


def batch_loss_and_grads(
    model: AggregationModel,
    examples: Sequence[Mapping[str, np.ndarray]],
    targets: np.ndarray,
    map_fn: MapFn = map,
) -> BatchResult:
    """Loss and exact gradients over a batch.

    ``map_fn`` fans out the per-example VLAD passes (e.g. ``executor.map``);
    results are consumed in example order and reduced in that order.
    """
    if not examples:
        raise ShapeError("Empty batch")
    targets = np.atleast_2d(np.asarray(targets, dtype=model.dtype))
    if targets.shape != (len(examples), model.num_classes):
        raise ShapeError(f"Targets shape {targets.shape} != ({len(examples)}, {model.num_classes})")

    def _encode(example):
        return [vlad_forward_with_cache(model.vlad[name], example[name]) for name in model.vlad]

    encoded = list(map_fn(_encode, examples))
    codes = [np.stack([row[m][0] for row in encoded]) for m in range(len(model.vlad))]
    y, head_cache = head_forward_with_cache(model.head, codes)
    loss = bce_loss(y, targets)
    head_grads, code_grads = head_backward(model.head, head_cache, bce_grad(y, targets))

    names = list(model.vlad)

    def _backward(index):
        return [
            vlad_backward(model.vlad[name], examples[index][name], code_grads[m][index], encoded[index][m][1])
            for m, name in enumerate(names)
        ]

    per_example = list(map_fn(_backward, range(len(examples))))

    grads: Dict[str, np.ndarray] = {}
    for m, name in enumerate(names):
        for part in ("W", "b", "C"):
            total = np.zeros_like(getattr(model.vlad[name], part))
            for example_grads in per_example:
                total += getattr(example_grads[m], part)
            grads[f"vlad.{name}.{part}"] = total
    for key, attr in _HEAD_FIELDS:
        grads[f"head.{key}"] = getattr(head_grads, attr)
    input_grads = [{name: example_grads[m].X for m, name in enumerate(names)} for example_grads in per_example]
    return BatchResult(loss, grads, input_grads)


def config_tensor(config: Mapping[str, Any]) -> np.ndarray:
    """JSON config snapshot as a u8 tensor (sorted keys, compact separators)."""
    text = json.dumps(dict(config), sort_keys=True, separators=(",", ":"))
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def save_model(
    model: AggregationModel, path: PathLike, extra_tensors: Optional[Mapping[str, np.ndarray]] = None
) -> str:
    """Write the model (and e.g. optimizer tensors) as a checkpoint; returns the SHA-256 digest."""
    tensors: Dict[str, np.ndarray] = dict(model.parameters())
    tensors[CONFIG_TENSOR] = config_tensor(model.config)
    for name, tensor in (extra_tensors or {}).items():
        if name in tensors:
            raise CheckpointError(f"Extra tensor {name!r} clashes with a model tensor")
        tensors[name] = tensor
    digest = write_tensors(path, tensors)
    _LOGGER.info("Wrote checkpoint %s (sha256 %s)", path, digest)
    return digest


def load_model(path: PathLike) -> Tuple[AggregationModel, Dict[str, np.ndarray]]:
    """Load a checkpoint; returns the model and any optimizer tensors stored alongside it."""
    tensors = read_tensors(path)
    if CONFIG_TENSOR not in tensors:
        raise CheckpointError(f"Checkpoint {path} has no {CONFIG_TENSOR} tensor")
    try:
        config = json.loads(tensors[CONFIG_TENSOR].tobytes().decode("utf-8"))
        modalities = tuple(ModalitySpec(**entry) for entry in config["modalities"])
        num_classes = int(config["num_classes"])
        norm_eps = float(config.get("norm_eps", DEFAULT_NORM_EPS))
    except (ValueError, KeyError, TypeError) as err:
        raise CheckpointError(f"Checkpoint {path} has an unreadable config snapshot: {err}") from err

    try:
        vlad = {
            spec.name: VladParams(
                W=tensors[f"vlad.{spec.name}.W"],
                b=tensors[f"vlad.{spec.name}.b"],
                C=tensors[f"vlad.{spec.name}.C"],
                norm_eps=norm_eps,
            )
            for spec in modalities
        }
        head = HeadParams(**{attr: tensors[f"head.{key}"] for key, attr in _HEAD_FIELDS})
        model = AggregationModel(modalities, num_classes, vlad, head, config)
    except KeyError as err:
        raise CheckpointError(f"Checkpoint {path} is missing tensor {err}") from err
    except ShapeError as err:
        raise CheckpointError(f"Checkpoint {path}: {err}") from err

    extra = {name: tensor for name, tensor in tensors.items() if name.startswith(OPTIMIZER_PREFIX)}
    return model, extra
