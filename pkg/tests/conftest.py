"""Shared fixtures: small on-disk datasets, seeded generators and tiny models."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import pytest

from mmagg.datastore import (
    Dataset,
    FeatureSequence,
    LabelVocabulary,
    ModalitySpec,
    VideoRecord,
    load_dataset,
    write_features,
    write_manifest,
)
from mmagg.model import init_model

DEFAULT_MODALITIES = (
    ModalitySpec("a", dim=3, fps=1.0, clusters=2),
    ModalitySpec("b", dim=2, fps=0.5, clusters=2),
)

# (id, duration_s, labels, split)
DEFAULT_VIDEOS = (
    ("v0", 30.0, (0,), "train"),
    ("v1", 45.0, (1, 2), "train"),
    ("v2", 20.0, (2,), "val"),
    ("v3", 25.0, (0, 1), "val"),
)


def make_rng(seed: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def build_dataset(
    root: Path,
    modalities: Sequence[ModalitySpec] = DEFAULT_MODALITIES,
    videos: Iterable[Tuple[str, float, Sequence[int], str]] = DEFAULT_VIDEOS,
    num_classes: int = 3,
    seed: int = 0,
    subsets: Optional[Mapping[str, Tuple[int, ...]]] = None,
    data: Optional[Mapping[Tuple[str, str], np.ndarray]] = None,
) -> Dataset:
    """Write random float32-exact features and a manifest under ``root``, then load it back.

    ``data`` may pin the matrix of selected (video id, modality) pairs.
    """
    rng = make_rng(seed)
    (root / "features").mkdir(parents=True, exist_ok=True)
    records = []
    for video_id, duration, labels, split in videos:
        paths = {}
        for spec in modalities:
            matrix = (data or {}).get((video_id, spec.name))
            if matrix is None:
                matrix = rng.standard_normal((spec.expected_count(duration), spec.dim))
            matrix = np.asarray(matrix, dtype=np.float32).astype(np.float64)
            path = root / "features" / f"{video_id}.{spec.name}.mmf"
            write_features(FeatureSequence(spec.name, matrix, spec.fps), path)
            paths[spec.name] = path
        records.append(VideoRecord(video_id, duration, frozenset(labels), paths, split))
    vocabulary = LabelVocabulary(tuple((c, f"class{c}") for c in range(num_classes)), dict(subsets or {}))
    manifest = write_manifest(root / "manifest.json", modalities, records, vocabulary)
    return load_dataset(manifest)


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(0)


@pytest.fixture
def dataset(tmp_path) -> Dataset:
    return build_dataset(tmp_path / "data", subsets={"first_two": (0, 1)})


@pytest.fixture
def long_dataset(tmp_path) -> Dataset:
    """One modality at 1 fps with a video spanning three ten-minute segments."""
    return build_dataset(
        tmp_path / "long",
        modalities=(ModalitySpec("a", dim=2, fps=1.0, clusters=2),),
        videos=(("long", 1300.0, (0,), "train"), ("short", 12.0, (1,), "val")),
        num_classes=2,
    )


@pytest.fixture
def model(dataset):
    return init_model(dataset.modalities, dataset.num_classes, hidden_size=6, experts=2, sample_size=4, seed=3)


@pytest.fixture
def model64(dataset):
    return init_model(
        dataset.modalities, dataset.num_classes, hidden_size=6, experts=2, sample_size=4, seed=3, dtype=np.float64
    )


def build_short_tail_dataset(root: Path) -> Dataset:
    """A 1205 s video at 1 fps whose file stops at 1200 rows, leaving the third segment empty."""
    return build_dataset(
        root,
        modalities=(ModalitySpec("a", dim=2, fps=1.0, clusters=2),),
        videos=(("long", 1205.0, (0,), "train"), ("short", 12.0, (1,), "train")),
        num_classes=2,
        data={("long", "a"): make_rng(4).standard_normal((1200, 2))},
    )
