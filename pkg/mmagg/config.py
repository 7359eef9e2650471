"""Run configuration: JSON file, voluptuous validation and command-line overrides."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import voluptuous as vol

from .const import (
    DEFAULT_ADAM_EPS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BETA1,
    DEFAULT_BETA2,
    DEFAULT_CLIP_BOUND,
    DEFAULT_EPOCHS,
    DEFAULT_EXPERTS,
    DEFAULT_HIDDEN_SIZE,
    DEFAULT_LR,
    DEFAULT_PCA_MAX_FRAMES,
    DEFAULT_REPEATS,
    DEFAULT_SAMPLE_SIZE,
    DEFAULT_SEED,
    DEFAULT_THREADS,
    DEFAULT_TIMELINE_STEP_S,
    DEFAULT_WHITEN_EPS,
)
from .datastore import Dataset, ModalitySpec
from .exceptions import ConfigError, ManifestError

_LOGGER = logging.getLogger(__name__)

PathLike = Union[str, Path]

_POSITIVE_INT = vol.All(int, vol.Range(min=1))
_NON_NEGATIVE_INT = vol.All(int, vol.Range(min=0))
_POSITIVE_REAL = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))
_UNIT_INTERVAL = vol.All(vol.Coerce(float), vol.Range(min=0, max=1, max_included=False))

OPTIMIZER_SCHEMA = vol.Schema(
    {
        vol.Optional("lr", default=DEFAULT_LR): vol.All(vol.Coerce(float), vol.Range(min=0)),
        vol.Optional("beta1", default=DEFAULT_BETA1): _UNIT_INTERVAL,
        vol.Optional("beta2", default=DEFAULT_BETA2): _UNIT_INTERVAL,
        vol.Optional("eps", default=DEFAULT_ADAM_EPS): _POSITIVE_REAL,
    }
)

RUN_CONFIG_SCHEMA = vol.Schema(
    {
        vol.Optional("manifest", default=None): vol.Any(None, str),
        vol.Optional("modalities", default=None): vol.Any(None, vol.All([str], vol.Length(min=1))),
        vol.Optional("clusters", default={}): {str: _POSITIVE_INT},
        vol.Optional("hidden_size", default=DEFAULT_HIDDEN_SIZE): _POSITIVE_INT,
        vol.Optional("experts", default=DEFAULT_EXPERTS): _POSITIVE_INT,
        vol.Optional("sample_size", default=DEFAULT_SAMPLE_SIZE): _POSITIVE_INT,
        vol.Optional("repeats", default=DEFAULT_REPEATS): _POSITIVE_INT,
        vol.Optional("batch_size", default=DEFAULT_BATCH_SIZE): _POSITIVE_INT,
        vol.Optional("epochs", default=DEFAULT_EPOCHS): _NON_NEGATIVE_INT,
        vol.Optional("seed", default=DEFAULT_SEED): _NON_NEGATIVE_INT,
        vol.Optional("optimizer", default={}): OPTIMIZER_SCHEMA,
        vol.Optional("whiten_eps", default=DEFAULT_WHITEN_EPS): _POSITIVE_REAL,
        vol.Optional("clip_bound", default=DEFAULT_CLIP_BOUND): _POSITIVE_REAL,
        vol.Optional("pca_max_frames", default=DEFAULT_PCA_MAX_FRAMES): vol.All(int, vol.Range(min=2)),
        vol.Optional("threads", default=DEFAULT_THREADS): _POSITIVE_INT,
        vol.Optional("timeline_step_s", default=DEFAULT_TIMELINE_STEP_S): _POSITIVE_REAL,
    }
)


@dataclass(frozen=True)
class RunConfig:
    """Validated run settings shared by every subcommand."""

    manifest: Optional[str] = None
    modalities: Optional[Tuple[str, ...]] = None
    clusters: Mapping[str, int] = field(default_factory=dict)
    hidden_size: int = DEFAULT_HIDDEN_SIZE
    experts: int = DEFAULT_EXPERTS
    sample_size: int = DEFAULT_SAMPLE_SIZE
    repeats: int = DEFAULT_REPEATS
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    seed: int = DEFAULT_SEED
    optimizer: Mapping[str, float] = field(default_factory=lambda: OPTIMIZER_SCHEMA({}))
    whiten_eps: float = DEFAULT_WHITEN_EPS
    clip_bound: float = DEFAULT_CLIP_BOUND
    pca_max_frames: int = DEFAULT_PCA_MAX_FRAMES
    threads: int = DEFAULT_THREADS
    timeline_step_s: float = DEFAULT_TIMELINE_STEP_S

    def to_dict(self) -> Dict[str, Any]:
        """Plain dict form, as a config file would hold it."""
        data = dataclasses.asdict(self)
        data["modalities"] = list(self.modalities) if self.modalities is not None else None
        data["clusters"] = dict(self.clusters)
        data["optimizer"] = dict(self.optimizer)
        return data

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """New config with every non-None override applied and the result re-validated."""
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if key in ("lr", "beta1", "beta2", "eps"):
                data["optimizer"][key] = value
            elif key in data:
                data[key] = list(value) if key == "modalities" else value
            else:
                raise ConfigError(f"Unknown config override {key!r}")
        return parse_run_config(data, "command line")


def parse_run_config(raw: Any, source: str = "<config>") -> RunConfig:
    """Validate raw config data into a RunConfig."""
    try:
        data = RUN_CONFIG_SCHEMA(raw if raw is not None else {})
    except vol.Invalid as err:
        raise ConfigError(f"Invalid run config {source}: {err}") from err
    if data["modalities"] is not None:
        data["modalities"] = tuple(data["modalities"])
        if len(set(data["modalities"])) != len(data["modalities"]):
            raise ConfigError(f"Run config {source} lists a modality twice")
    return RunConfig(**data)


def load_run_config(path: Optional[PathLike], defaults: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read a JSON run config; all defaults when ``path`` is None.

    ``defaults`` replace the built-in defaults for keys the file leaves out.
    """
    if path is None:
        return parse_run_config(dict(defaults or {}))
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"Cannot read run config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"Run config {path} is not valid JSON: {err}") from err
    if defaults and isinstance(raw, dict):
        raw = {**defaults, **raw}
    config = parse_run_config(raw, str(path))
    _LOGGER.debug("Loaded run config %s", path)
    return config


def resolve_modalities(config: RunConfig, dataset: Dataset) -> List[ModalitySpec]:
    """The manifest's modalities (restricted and reclustered as configured), in manifest order."""
    known = [spec.name for spec in dataset.modalities]
    selected = config.modalities if config.modalities is not None else tuple(known)
    for name in list(selected) + list(config.clusters):
        if name not in known:
            raise ConfigError(f"Run config names modality {name!r} missing from the manifest {known}")
    try:
        return [
            dataclasses.replace(spec, clusters=config.clusters.get(spec.name, spec.clusters))
            for spec in dataset.modalities
            if spec.name in selected
        ]
    except ManifestError as err:
        raise ConfigError(str(err)) from err


def check_against_model(specs: List[ModalitySpec], dataset: Dataset) -> None:
    """Every model modality must exist in the manifest with the same dim and feature rate."""
    for spec in specs:
        try:
            other = dataset.modality(spec.name)
        except ManifestError as err:
            raise ConfigError(f"Model modality {spec.name!r} is not in the manifest") from err
        if other.dim != spec.dim or other.fps != spec.fps:
            raise ConfigError(
                f"Modality {spec.name!r}: model expects dim {spec.dim} at {spec.fps} fps, "
                f"manifest has dim {other.dim} at {other.fps} fps"
            )
