"""Seeded synthetic multi-modal datasets with class signal in chosen modalities."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import voluptuous as vol

from .const import SPLIT_TRAIN, SPLIT_VAL
from .datastore import FeatureSequence, LabelVocabulary, ModalitySpec, VideoRecord, write_features, write_manifest
from .exceptions import MMAggError, SynthError

_LOGGER = logging.getLogger(__name__)

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.json"
FEATURE_DIR = "features"

_HOLDOUT_FRACTION = vol.All(vol.Coerce(float), vol.Range(min=0, max=1, max_included=False))

SYNTH_MODALITY_SCHEMA = vol.Schema(
    {
        vol.Required("name"): vol.All(str, vol.Length(min=1)),
        vol.Required("dim"): vol.All(int, vol.Range(min=1)),
        vol.Required("fps"): vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False)),
        vol.Optional("clusters", default=8): vol.All(int, vol.Range(min=1)),
        vol.Optional("informative_classes", default=None): vol.Any(None, [vol.All(int, vol.Range(min=0))]),
        vol.Optional("temporal_window", default=1): vol.All(int, vol.Range(min=1)),
    }
)

SYNTH_SPEC_SCHEMA = vol.Schema(
    {
        vol.Required("num_classes"): vol.All(int, vol.Range(min=2)),
        vol.Required("videos_per_class"): vol.All(int, vol.Range(min=2)),
        vol.Required("modalities"): vol.All([SYNTH_MODALITY_SCHEMA], vol.Length(min=1)),
        vol.Optional("duration_s", default=60.0): vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False)),
        vol.Optional("noise_scale", default=1.0): vol.All(vol.Coerce(float), vol.Range(min=0)),
        vol.Optional("signal_scale", default=2.0): vol.All(vol.Coerce(float), vol.Range(min=0)),
        vol.Optional("signal_fraction", default=0.2): vol.All(vol.Coerce(float), vol.Range(min=0, max=1)),
        vol.Optional("val_fraction", default=0.3): _HOLDOUT_FRACTION,
        vol.Optional("temporal", default=False): bool,
        vol.Optional("solvable", default=True): bool,
        vol.Optional("seed", default=0): vol.All(int, vol.Range(min=0)),
    }
)


@dataclass(frozen=True)
class SynthModality:
    """One generated feature stream.

    ``informative_classes`` lists the classes whose signal this modality carries
    (None: every class, empty: pure noise). In temporal mode a window of 1 gives
    one motif block per row and a window of L gives all L blocks concatenated on
    one row.
    """

    name: str
    dim: int
    fps: float
    clusters: int = 8
    informative_classes: Optional[Tuple[int, ...]] = None
    temporal_window: int = 1

    def informs(self, class_index: int) -> bool:
        """Whether this modality carries signal for ``class_index``."""
        return self.informative_classes is None or class_index in self.informative_classes


@dataclass(frozen=True)
class SynthSpec:
    """A synthetic dataset: classes, videos per class, modalities and planted signal."""

    num_classes: int
    videos_per_class: int
    modalities: Tuple[SynthModality, ...]
    duration_s: float = 60.0
    noise_scale: float = 1.0
    signal_scale: float = 2.0
    signal_fraction: float = 0.2
    val_fraction: float = 0.3
    temporal: bool = False
    solvable: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if len({modality.name for modality in self.modalities}) != len(self.modalities):
            raise SynthError("Synthetic modality names must be unique")
        for modality in self.modalities:
            bad = [c for c in modality.informative_classes or () if not 0 <= c < self.num_classes]
            if bad:
                raise SynthError(f"Modality {modality.name!r} informs unknown classes {bad}")
        if self.solvable:
            uncovered = [
                c for c in range(self.num_classes) if not any(modality.informs(c) for modality in self.modalities)
            ]
            if uncovered:
                raise SynthError(f"Classes {uncovered} have no informative modality")
        if self.temporal:
            length = motif_length(self.num_classes)
            for modality in self.modalities:
                if modality.temporal_window not in (1, length):
                    raise SynthError(f"Modality {modality.name!r}: temporal window must be 1 or {length}")
                if modality.dim % modality.temporal_window:
                    raise SynthError(f"Modality {modality.name!r}: dim must be a multiple of its window")


def motif_length(num_classes: int) -> int:
    """Smallest L >= 3 with at least ``num_classes`` distinct orderings of L blocks."""
    length = 3
    while math.factorial(length) < num_classes:
        length += 1
    return length


def parse_synth_spec(raw: Any, source: str = "<synth spec>") -> SynthSpec:
    """Validate raw synth spec data into a SynthSpec."""
    try:
        data = SYNTH_SPEC_SCHEMA(raw)
    except vol.Invalid as err:
        raise SynthError(f"Invalid synth spec {source}: {err}") from err
    modalities = tuple(
        SynthModality(
            name=entry["name"],
            dim=entry["dim"],
            fps=entry["fps"],
            clusters=entry["clusters"],
            informative_classes=(
                tuple(entry["informative_classes"]) if entry["informative_classes"] is not None else None
            ),
            temporal_window=entry["temporal_window"],
        )
        for entry in data.pop("modalities")
    )
    return SynthSpec(modalities=modalities, **data)


def load_synth_spec(path: PathLike) -> SynthSpec:
    """Read and validate a JSON synth spec."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise SynthError(f"Cannot read synth spec {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise SynthError(f"Synth spec {path} is not valid JSON: {err}") from err
    return parse_synth_spec(raw, str(path))


def _video_frames(
    spec: SynthSpec,
    modality: SynthModality,
    class_index: int,
    count: int,
    class_means: np.ndarray,
    motif: Optional[np.ndarray],
    rng: np.random.Generator,
) -> np.ndarray:
    frames = spec.noise_scale * rng.standard_normal((count, modality.dim))
    if not modality.informs(class_index):
        return frames
    if motif is not None:
        # motif: L x block rows in this class's order
        if modality.temporal_window == 1:
            offset = int(rng.integers(motif.shape[0]))
            frames += motif[(np.arange(count) + offset) % motif.shape[0]]
        else:
            frames += motif.reshape(-1)
        return frames
    marked = max(1, int(round(spec.signal_fraction * count)))
    rows = rng.choice(count, size=min(marked, count), replace=False)
    frames[rows] += class_means[class_index]
    return frames


def generate(spec: SynthSpec, out_dir: PathLike) -> Path:
    """Write feature files and a manifest for ``spec`` under ``out_dir``; returns the manifest path.

    The last ``val_fraction`` of every class's videos go to the val split.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / FEATURE_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise SynthError(f"Cannot create output directory {out_dir}: {err}") from err

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    means = {m.name: spec.signal_scale * rng.standard_normal((spec.num_classes, m.dim)) for m in spec.modalities}

    motifs: Dict[str, np.ndarray] = {}
    if spec.temporal:
        length = motif_length(spec.num_classes)
        orderings = list(itertools.permutations(range(length)))
        chosen = rng.choice(len(orderings), size=spec.num_classes, replace=False)
        pools: Dict[int, np.ndarray] = {}
        for modality in spec.modalities:
            block = modality.dim // modality.temporal_window
            if block not in pools:
                pools[block] = spec.signal_scale * rng.standard_normal((length, block))
        class_orders = [orderings[index] for index in chosen]
        motifs = {
            f"{m.name}:{c}": pools[m.dim // m.temporal_window][list(class_orders[c])]
            for m in spec.modalities
            for c in range(spec.num_classes)
        }

    specs = [ModalitySpec(m.name, m.dim, m.fps, m.clusters) for m in spec.modalities]
    val_count = int(round(spec.val_fraction * spec.videos_per_class))
    records: List[VideoRecord] = []
    try:
        for class_index in range(spec.num_classes):
            for position in range(spec.videos_per_class):
                video_id = f"c{class_index:02d}v{position:04d}"
                split = SPLIT_VAL if position >= spec.videos_per_class - val_count else SPLIT_TRAIN
                paths = {}
                for modality, modality_spec in zip(spec.modalities, specs):
                    count = modality_spec.expected_count(spec.duration_s)
                    motif = motifs.get(f"{modality.name}:{class_index}")
                    frames = _video_frames(spec, modality, class_index, count, means[modality.name], motif, rng)
                    path = out_dir / FEATURE_DIR / f"{video_id}.{modality.name}.mmf"
                    write_features(FeatureSequence(modality.name, frames, modality.fps), path)
                    paths[modality.name] = path
                records.append(VideoRecord(video_id, spec.duration_s, frozenset([class_index]), paths, split))
        vocabulary = LabelVocabulary(tuple((c, f"class_{c}") for c in range(spec.num_classes)))
        manifest = write_manifest(out_dir / MANIFEST_NAME, specs, records, vocabulary)
    except MMAggError as err:
        raise SynthError(f"Cannot write synthetic dataset to {out_dir}: {err}") from err
    _LOGGER.info("Generated %d synthetic videos in %s", len(records), out_dir)
    return manifest


def complementary_preset(seed: int = 0, videos_per_class: int = 50) -> SynthSpec:
    """Four classes: 0-1 only visible in modality ``a``, 2-3 only in ``b``."""
    return SynthSpec(
        num_classes=4,
        videos_per_class=videos_per_class,
        modalities=(
            SynthModality("a", dim=8, fps=1.0, clusters=8, informative_classes=(0, 1)),
            SynthModality("b", dim=8, fps=1.0, clusters=8, informative_classes=(2, 3)),
        ),
        duration_s=60.0,
        seed=seed,
    )


def temporal_preset(seed: int = 0, videos_per_class: int = 50) -> SynthSpec:
    """Four classes told apart only by the order of three shared blocks.

    ``frame`` carries one block per row, ``temporal`` all three on each row.
    """
    return SynthSpec(
        num_classes=4,
        videos_per_class=videos_per_class,
        modalities=(
            SynthModality("frame", dim=4, fps=1.0, clusters=8, temporal_window=1),
            SynthModality("temporal", dim=12, fps=1.0 / 3.0, clusters=8, temporal_window=3),
        ),
        duration_s=90.0,
        temporal=True,
        seed=seed,
    )


def uninformative_preset(seed: int = 0, videos_per_class: int = 50) -> SynthSpec:
    """Four classes over a single pure-noise modality."""
    return SynthSpec(
        num_classes=4,
        videos_per_class=videos_per_class,
        modalities=(SynthModality("noise", dim=8, fps=1.0, clusters=8, informative_classes=()),),
        duration_s=60.0,
        solvable=False,
        seed=seed,
    )


PRESETS: Dict[str, Callable[..., SynthSpec]] = {
    "complementary": complementary_preset,
    "temporal": temporal_preset,
    "uninformative": uninformative_preset,
}
