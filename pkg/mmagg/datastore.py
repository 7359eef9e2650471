"""Dataset manifest, binary feature files and prediction CSVs."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import voluptuous as vol

from . import preprocess
from .const import (
    DEFAULT_CLIP_BOUND,
    DEFAULT_LEVELS,
    DEFAULT_PCA_MAX_FRAMES,
    DEFAULT_WHITEN_EPS,
    FEATURE_DTYPE_QUANTIZED,
    FEATURE_DTYPE_RAW,
    FEATURE_MAGIC,
    LABELED_SPLITS,
    PREDICTION_COLUMNS,
    SPLIT_TRAIN,
    SPLITS,
)
from .exceptions import FeatureFileError, ManifestError, PreprocessError

_LOGGER = logging.getLogger(__name__)

PathLike = Union[str, Path]

_FEATURE_HEADER = struct.Struct("<4sBIdQ")
_CLIP_BOUND = struct.Struct("<f")


def _finite(value: float) -> float:
    """Voluptuous validator rejecting NaN and infinities."""
    if not math.isfinite(value):
        raise vol.Invalid("value must be finite")
    return value


def _strict_int(value: Any) -> int:
    """Voluptuous validator accepting ints but not booleans."""
    if isinstance(value, bool) or not isinstance(value, int):
        raise vol.Invalid("expected an integer")
    return value


_POSITIVE_REAL = vol.All(vol.Coerce(float), _finite, vol.Range(min=0, min_included=False))
_POSITIVE_INT = vol.All(_strict_int, vol.Range(min=1))
_IDENTIFIER = vol.All(str, vol.Length(min=1))
# names that become part of feature file names
_FILE_SAFE_NAME = vol.All(str, vol.Match(r"^(?!\.\.?\Z)[^/\\\x00]+\Z", msg="must be usable in a file name"))

MODALITY_SCHEMA = vol.Schema(
    {
        vol.Required("name"): _FILE_SAFE_NAME,
        vol.Required("dim"): _POSITIVE_INT,
        vol.Required("fps"): _POSITIVE_REAL,
        vol.Required("clusters"): _POSITIVE_INT,
    }
)

VIDEO_SCHEMA = vol.Schema(
    {
        vol.Required("id"): _FILE_SAFE_NAME,
        vol.Required("duration_s"): _POSITIVE_REAL,
        vol.Required("labels"): [_strict_int],
        vol.Required("features"): {str: _IDENTIFIER},
        vol.Optional("split", default=SPLIT_TRAIN): vol.In(SPLITS),
    }
)

MANIFEST_SCHEMA = vol.Schema(
    {
        vol.Required("num_classes"): _POSITIVE_INT,
        vol.Required("modalities"): vol.All([MODALITY_SCHEMA], vol.Length(min=1)),
        vol.Required("videos"): [VIDEO_SCHEMA],
        vol.Required("labels"): [str],
        vol.Optional("subsets", default={}): {str: [_strict_int]},
    }
)


@dataclass(frozen=True)
class ModalitySpec:
    """Per-modality metadata: post-PCA dimension, feature rate and VLAD cluster count."""

    name: str
    dim: int
    fps: float
    clusters: int

    def __post_init__(self) -> None:
        if not self.name:
            raise ManifestError("Modality name must be non-empty")
        if self.dim < 1 or self.clusters < 1 or not (self.fps > 0 and math.isfinite(self.fps)):
            raise ManifestError(f"Modality {self.name!r} needs dim >= 1, clusters >= 1 and fps > 0")

    @property
    def period_s(self) -> float:
        """Seconds between consecutive features."""
        return 1.0 / self.fps

    def expected_count(self, duration_s: float) -> int:
        """Number of features a video of ``duration_s`` seconds should carry at this rate."""
        return math.ceil(duration_s * self.fps)

    def to_dict(self) -> Dict[str, Any]:
        """Manifest entry for this modality."""
        return {"name": self.name, "dim": self.dim, "fps": self.fps, "clusters": self.clusters}


@dataclass(frozen=True)
class FeatureSequence:
    """One video's T x D feature matrix for one modality; row i is at i / fps seconds.

    Values are held at the 32-bit precision feature files store.
    """

    modality: str
    data: np.ndarray
    fps: float

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise FeatureFileError(f"Feature data for {self.modality!r} must be T x D, got shape {data.shape}")
        if data.shape[1] < 1:
            raise FeatureFileError(f"Feature dimension for {self.modality!r} must be >= 1")
        if not (self.fps > 0 and math.isfinite(self.fps)):
            raise FeatureFileError(f"Feature rate for {self.modality!r} must be positive, got {self.fps}")
        if not np.all(np.isfinite(data)):
            raise FeatureFileError(f"Feature data for {self.modality!r} contains non-finite values")
        with np.errstate(over="ignore"):
            data = data.astype(np.float32).astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise FeatureFileError(f"Feature data for {self.modality!r} exceeds the 32-bit range of feature files")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def count(self) -> int:
        """Number of feature rows."""
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        """Feature dimension."""
        return self.data.shape[1]

    def timestamps(self) -> np.ndarray:
        """Implicit timestamps i / fps of every row."""
        return np.arange(self.count, dtype=np.float64) / self.fps


@dataclass(frozen=True)
class VideoRecord:
    """One manifest entry: duration, label set and per-modality feature files."""

    id: str
    duration_s: float
    labels: FrozenSet[int]
    features: Mapping[str, Path]
    split: str = SPLIT_TRAIN


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered (class index, class name) entries plus optional named class subsets."""

    entries: Tuple[Tuple[int, str], ...]
    subsets: Mapping[str, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        indices = [index for index, _ in self.entries]
        if indices != list(range(len(indices))):
            raise ManifestError("Label indices must be exactly 0..num_classes-1, each once")

    @property
    def num_classes(self) -> int:
        """Number of classes."""
        return len(self.entries)

    @property
    def names(self) -> List[str]:
        """Class names in index order."""
        return [name for _, name in self.entries]

    def subset_mask(self, name: str) -> np.ndarray:
        """Boolean class mask of a named subset."""
        if name not in self.subsets:
            raise ManifestError(f"Unknown class subset {name!r}; known: {sorted(self.subsets)}")
        mask = np.zeros(self.num_classes, dtype=bool)
        mask[list(self.subsets[name])] = True
        return mask


@dataclass(frozen=True)
class Dataset:
    """A validated manifest: modality specs, video records and label vocabulary."""

    modalities: Tuple[ModalitySpec, ...]
    videos: Tuple[VideoRecord, ...]
    vocabulary: LabelVocabulary
    path: Optional[Path] = None

    @property
    def num_classes(self) -> int:
        """Number of classes in the vocabulary."""
        return self.vocabulary.num_classes

    def modality(self, name: str) -> ModalitySpec:
        """Modality spec by name."""
        for spec in self.modalities:
            if spec.name == name:
                return spec
        raise ManifestError(f"Unknown modality {name!r}")

    def video(self, video_id: str) -> VideoRecord:
        """Video record by id."""
        for record in self.videos:
            if record.id == video_id:
                return record
        raise ManifestError(f"Unknown video {video_id!r}")

    def split(self, name: Optional[str]) -> List[VideoRecord]:
        """Videos of one split, in manifest order (all videos when ``name`` is None)."""
        return [record for record in self.videos if name is None or record.split == name]


def _parse_manifest(raw: Any, root: Path, source: str) -> Dataset:
    """Validate a decoded manifest object and build the dataset description."""
    try:
        manifest = MANIFEST_SCHEMA(raw)
    except vol.Invalid as err:
        raise ManifestError(f"Invalid manifest {source}: {err}") from err

    num_classes = manifest["num_classes"]
    if len(manifest["labels"]) != num_classes:
        raise ManifestError(f"Manifest lists {len(manifest['labels'])} label names for {num_classes} classes")

    specs: List[ModalitySpec] = []
    for entry in manifest["modalities"]:
        if any(spec.name == entry["name"] for spec in specs):
            raise ManifestError(f"Duplicate modality name {entry['name']!r}")
        specs.append(ModalitySpec(entry["name"], entry["dim"], entry["fps"], entry["clusters"]))
    known = {spec.name for spec in specs}

    subsets: Dict[str, Tuple[int, ...]] = {}
    for name, indices in manifest["subsets"].items():
        bad = [index for index in indices if not 0 <= index < num_classes]
        if bad:
            raise ManifestError(f"Subset {name!r} has class indices out of range: {bad}")
        subsets[name] = tuple(sorted(set(indices)))

    records: List[VideoRecord] = []
    seen_ids = set()
    for entry in manifest["videos"]:
        video_id = entry["id"]
        if video_id in seen_ids:
            raise ManifestError(f"Duplicate video id {video_id!r}")
        seen_ids.add(video_id)

        bad = [label for label in entry["labels"] if not 0 <= label < num_classes]
        if bad:
            raise ManifestError(f"Video {video_id!r} has label indices out of range: {bad}")
        if not entry["labels"] and entry["split"] in LABELED_SPLITS:
            raise ManifestError(f"Video {video_id!r} in split {entry['split']!r} has no labels")

        features: Dict[str, Path] = {}
        for modality, rel_path in entry["features"].items():
            if modality not in known:
                raise ManifestError(f"Video {video_id!r} references unknown modality {modality!r}")
            path = Path(rel_path)
            if not path.is_absolute():
                path = Path(os.path.normpath(root / path))
            if not path.is_file():
                raise ManifestError(f"Video {video_id!r} feature file for {modality!r} not found: {path}")
            features[modality] = path

        records.append(
            VideoRecord(
                id=video_id,
                duration_s=entry["duration_s"],
                labels=frozenset(entry["labels"]),
                features=features,
                split=entry["split"],
            )
        )

    vocabulary = LabelVocabulary(tuple(enumerate(manifest["labels"])), subsets)
    return Dataset(tuple(specs), tuple(records), vocabulary)


def load_dataset(path: PathLike) -> Dataset:
    """Load and fully validate a manifest file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise ManifestError(f"Cannot read manifest {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ManifestError(f"Manifest {path} is not valid JSON: {err}") from err

    dataset = _parse_manifest(raw, path.parent, str(path))
    _LOGGER.debug(
        "Loaded manifest %s: %d modalities, %d videos, %d classes",
        path,
        len(dataset.modalities),
        len(dataset.videos),
        dataset.num_classes,
    )
    return Dataset(dataset.modalities, dataset.videos, dataset.vocabulary, path)


def load_manifest(path: PathLike) -> Tuple[List[ModalitySpec], List[VideoRecord], LabelVocabulary]:
    """Load a manifest and return (modality specs, video records, label vocabulary)."""
    dataset = load_dataset(path)
    return list(dataset.modalities), list(dataset.videos), dataset.vocabulary


def manifest_object(
    modalities: Sequence[ModalitySpec],
    videos: Sequence[VideoRecord],
    vocabulary: LabelVocabulary,
    root: Optional[Path] = None,
) -> Dict[str, Any]:
    """Build the JSON object for a manifest; feature paths are made relative to ``root`` when possible."""

    def _rel(path: Path) -> str:
        """Path as stored in the manifest: POSIX, relative to the manifest when possible."""
        if root is not None:
            try:
                return Path(os.path.relpath(path, root)).as_posix()
            except ValueError:
                pass
        return Path(path).as_posix()

    manifest: Dict[str, Any] = {
        "num_classes": vocabulary.num_classes,
        "labels": vocabulary.names,
        "modalities": [spec.to_dict() for spec in modalities],
        "videos": [
            {
                "id": record.id,
                "duration_s": record.duration_s,
                "labels": sorted(record.labels),
                "split": record.split,
                "features": {name: _rel(path) for name, path in record.features.items()},
            }
            for record in videos
        ],
    }
    if vocabulary.subsets:
        manifest["subsets"] = {name: list(indices) for name, indices in vocabulary.subsets.items()}
    return manifest


def write_manifest(
    path: PathLike,
    modalities: Sequence[ModalitySpec],
    videos: Sequence[VideoRecord],
    vocabulary: LabelVocabulary,
) -> Path:
    """Write a manifest file with feature paths relative to its directory."""
    path = Path(path)
    manifest = manifest_object(modalities, videos, vocabulary, root=path.parent)
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as err:
        raise ManifestError(f"Cannot write manifest {path}: {err}") from err
    return path


def read_features(path: PathLike, modality: str = "") -> FeatureSequence:
    """Read a feature file; quantized payloads are returned dequantized."""
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as err:
        raise FeatureFileError(f"Cannot read feature file {path}: {err}") from err

    if len(payload) < _FEATURE_HEADER.size:
        raise FeatureFileError(f"Feature file {path} header truncated")
    magic, dtype, dim, fps, count = _FEATURE_HEADER.unpack_from(payload, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"Feature file {path} has bad magic {magic!r}")
    if dim == 0:
        raise FeatureFileError(f"Feature file {path} declares dim=0")
    if not (fps > 0 and math.isfinite(fps)):
        raise FeatureFileError(f"Feature file {path} declares invalid fps {fps}")

    offset = _FEATURE_HEADER.size
    if dtype == FEATURE_DTYPE_RAW:
        itemsize = 4
    elif dtype == FEATURE_DTYPE_QUANTIZED:
        if len(payload) < offset + _CLIP_BOUND.size:
            raise FeatureFileError(f"Feature file {path} header truncated")
        (clip_bound,) = _CLIP_BOUND.unpack_from(payload, offset)
        offset += _CLIP_BOUND.size
        itemsize = 1
    else:
        raise FeatureFileError(f"Feature file {path} has unknown dtype {dtype}")

    expected = count * dim * itemsize
    available = len(payload) - offset
    if available < expected:
        raise FeatureFileError(f"Feature file {path} truncated: expected {expected} payload bytes, found {available}")
    if available > expected:
        raise FeatureFileError(f"Feature file {path} has {available - expected} trailing bytes")

    if count == 0:
        values = np.zeros(0)
    elif dtype == FEATURE_DTYPE_RAW:
        values = np.frombuffer(payload, dtype="<f4", count=count * dim, offset=offset).astype(np.float64)
    else:
        codes = np.frombuffer(payload, dtype=np.uint8, count=count * dim, offset=offset)
        try:
            values = preprocess.dequantize(codes, float(clip_bound), DEFAULT_LEVELS)
        except PreprocessError as err:
            raise FeatureFileError(f"Feature file {path}: {err}") from err

    return FeatureSequence(modality=modality, data=values.reshape(count, dim), fps=fps)


def write_features(
    seq: FeatureSequence,
    path: PathLike,
    quantize: bool = False,
    clip_bound: float = DEFAULT_CLIP_BOUND,
) -> None:
    """Write a feature file: 32-bit reals, or 8-bit codes of the clipped values when ``quantize``."""
    if quantize:
        # the header holds B as f32; quantize against that same value
        try:
            (clip_bound,) = _CLIP_BOUND.unpack(_CLIP_BOUND.pack(clip_bound))
        except (OverflowError, struct.error) as err:
            raise FeatureFileError(f"Clip bound {clip_bound} does not fit a feature file header: {err}") from err
        header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_DTYPE_QUANTIZED, seq.dim, seq.fps, seq.count)
        body = _CLIP_BOUND.pack(clip_bound) + preprocess.quantize(seq.data, clip_bound, DEFAULT_LEVELS).tobytes()
    else:
        header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_DTYPE_RAW, seq.dim, seq.fps, seq.count)
        body = np.ascontiguousarray(seq.data, dtype="<f4").tobytes()
    try:
        Path(path).write_bytes(header + body)
    except OSError as err:
        raise FeatureFileError(f"Cannot write feature file {path}: {err}") from err


def load_video_features(record: VideoRecord, modalities: Sequence[ModalitySpec]) -> Dict[str, FeatureSequence]:
    """Read every listed modality of one video and check it against the manifest."""
    sequences: Dict[str, FeatureSequence] = {}
    for spec in modalities:
        if spec.name not in record.features:
            raise FeatureFileError(f"Video {record.id!r} has no features for modality {spec.name!r}")
        seq = read_features(record.features[spec.name], spec.name)
        if seq.dim != spec.dim:
            raise FeatureFileError(
                f"Video {record.id!r} modality {spec.name!r}: file dim {seq.dim} != manifest dim {spec.dim}"
            )
        if not math.isclose(seq.fps, spec.fps, rel_tol=1e-9):
            raise FeatureFileError(
                f"Video {record.id!r} modality {spec.name!r}: file fps {seq.fps} != manifest fps {spec.fps}"
            )
        expected = spec.expected_count(record.duration_s)
        if seq.count != expected:
            _LOGGER.debug(
                "Video %s modality %s carries %d rows, %d expected at %.4g fps",
                record.id,
                spec.name,
                seq.count,
                expected,
                spec.fps,
            )
        sequences[spec.name] = seq
    return sequences


def write_predictions(path: PathLike, video_ids: Sequence[str], probs: np.ndarray) -> None:
    """Write a predictions CSV with one row per (video, class)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[0] != len(video_ids):
        raise FeatureFileError(f"{len(video_ids)} video ids for {probs.shape[0]} probability rows")
    num_classes = probs.shape[1]
    frame = pd.DataFrame(
        {
            "video_id": np.repeat(np.asarray(video_ids, dtype=object), num_classes),
            "class_index": np.tile(np.arange(num_classes), len(video_ids)),
            "score": probs.reshape(-1),
        },
        columns=list(PREDICTION_COLUMNS),
    )
    try:
        frame.to_csv(path, index=False)
    except OSError as err:
        raise FeatureFileError(f"Cannot write predictions {path}: {err}") from err


def read_predictions(path: PathLike) -> Tuple[List[str], np.ndarray]:
    """Read a predictions CSV into (video ids in file order, V x C probability matrix)."""
    try:
        frame = pd.read_csv(path, dtype={"video_id": str}, float_precision="round_trip")
    except (OSError, ValueError, pd.errors.ParserError) as err:
        raise FeatureFileError(f"Cannot read predictions {path}: {err}") from err
    if tuple(frame.columns) != PREDICTION_COLUMNS:
        raise FeatureFileError(f"Predictions {path} must have header {','.join(PREDICTION_COLUMNS)}")
    if frame.empty:
        raise FeatureFileError(f"Predictions {path} are empty")

    scores = frame["score"].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(scores)) or scores.min() < 0 or scores.max() > 1:
        raise FeatureFileError(f"Predictions {path} have scores outside [0, 1]")

    video_ids = list(dict.fromkeys(frame["video_id"]))
    num_classes = int(frame["class_index"].max()) + 1
    if len(frame) != len(video_ids) * num_classes:
        raise FeatureFileError(f"Predictions {path} must list every class exactly once per video")
    rows = {video_id: row for row, video_id in enumerate(video_ids)}
    probs = np.full((len(video_ids), num_classes), np.nan)
    row_index = frame["video_id"].map(rows).to_numpy()
    class_index = frame["class_index"].to_numpy()
    if class_index.min() < 0:
        raise FeatureFileError(f"Predictions {path} have negative class indices")
    probs[row_index, class_index] = scores
    if np.isnan(probs).any():
        raise FeatureFileError(f"Predictions {path} must list every class exactly once per video")
    return video_ids, probs


def fit_preprocess(
    dataset: Dataset,
    dims: Mapping[str, int],
    *,
    max_frames: int = DEFAULT_PCA_MAX_FRAMES,
    seed: int = 0,
    split: Optional[str] = SPLIT_TRAIN,
    whiten_eps: float = DEFAULT_WHITEN_EPS,
    clip_bound: float = DEFAULT_CLIP_BOUND,
) -> Dict[str, preprocess.PreprocessModel]:
    """Fit one PreprocessModel per modality named in ``dims`` on the split's frames."""
    records = dataset.split(split)
    if not records:
        raise PreprocessError(f"No videos in split {split!r} to fit preprocessing on")
    models: Dict[str, preprocess.PreprocessModel] = {}
    for name, target_dim in dims.items():
        try:
            spec = dataset.modality(name)
        except ManifestError as err:
            raise PreprocessError(str(err)) from err
        sequences = [load_video_features(record, [spec])[name] for record in records]
        models[name] = preprocess.fit_from_sequences(
            sequences,
            target_dim,
            max_frames=max_frames,
            seed=seed,
            whiten_eps=whiten_eps,
            clip_bound=clip_bound,
        )
    return models


def apply_preprocess(
    dataset: Dataset,
    models: Mapping[str, preprocess.PreprocessModel],
    out_dir: PathLike,
    *,
    quantize: bool = False,
) -> Path:
    """Transform every feature file of the modalities in ``models`` and write a new manifest.

    Modalities without a model are referenced in place. The new manifest lists
    post-PCA dims and lives at ``out_dir/manifest.json``.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "features").mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise PreprocessError(f"Cannot create output directory {out_dir}: {err}") from err

    specs = [
        ModalitySpec(spec.name, models[spec.name].output_dim, spec.fps, spec.clusters) if spec.name in models else spec
        for spec in dataset.modalities
    ]
    records: List[VideoRecord] = []
    for record in dataset.videos:
        features = dict(record.features)
        for name, model in models.items():
            if name not in record.features:
                continue
            seq = read_features(record.features[name], name)
            if seq.dim != model.input_dim:
                raise PreprocessError(
                    f"Video {record.id!r} modality {name!r}: dim {seq.dim} != model input {model.input_dim}"
                )
            transformed = FeatureSequence(name, preprocess.transform(model, seq.data), seq.fps)
            target = out_dir / "features" / f"{record.id}.{name}.mmf"
            write_features(transformed, target, quantize=quantize, clip_bound=model.clip_bound)
            features[name] = target
        records.append(VideoRecord(record.id, record.duration_s, record.labels, features, record.split))
    manifest = write_manifest(out_dir / "manifest.json", specs, records, dataset.vocabulary)
    _LOGGER.info("Preprocessed %d videos into %s (quantized: %s)", len(records), out_dir, quantize)
    return manifest
