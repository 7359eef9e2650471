"""Average precision, mAP over classes and prediction-level ensembling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .const import CLASS_AP_COLUMNS
from .datastore import Dataset, read_predictions, write_predictions
from .exceptions import EvaluationError, ManifestError
from .head import Prediction

_LOGGER = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class PredictionSet:
    """One probability vector per video, optionally with ground-truth label sets and class names."""

    video_ids: Tuple[str, ...]
    probs: np.ndarray
    labels: Optional[Tuple[FrozenSet[int], ...]] = None
    class_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self) -> None:
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[0] != len(self.video_ids):
            raise EvaluationError(f"Expected {len(self.video_ids)} x C probabilities, got shape {probs.shape}")
        if len(set(self.video_ids)) != len(self.video_ids):
            raise EvaluationError("Prediction video ids must be unique")
        if self.labels is not None and len(self.labels) != len(self.video_ids):
            raise EvaluationError("Label sets do not align with video ids")
        probs.setflags(write=False)
        object.__setattr__(self, "video_ids", tuple(self.video_ids))
        object.__setattr__(self, "probs", probs)

    @property
    def num_classes(self) -> int:
        """Number of classes per probability vector."""
        return self.probs.shape[1]

    @classmethod
    def from_predictions(cls, predictions: Sequence[Prediction]) -> "PredictionSet":
        """Stack Prediction records into one set."""
        if not predictions:
            raise EvaluationError("No predictions")
        return cls(tuple(p.video_id for p in predictions), np.stack([p.probs for p in predictions]))

    def predictions(self) -> List[Prediction]:
        """One Prediction record per video."""
        return [Prediction(video_id, row) for video_id, row in zip(self.video_ids, self.probs)]

    @classmethod
    def from_csv(cls, path: PathLike) -> "PredictionSet":
        """Read a predictions CSV."""
        video_ids, probs = read_predictions(path)
        return cls(tuple(video_ids), probs)

    def to_csv(self, path: PathLike) -> None:
        """Write a predictions CSV."""
        write_predictions(path, self.video_ids, self.probs)

    def with_ground_truth(self, dataset: Dataset) -> "PredictionSet":
        """Attach label sets and class names from a manifest."""
        if dataset.num_classes != self.num_classes:
            raise EvaluationError(f"Predictions have {self.num_classes} classes, manifest {dataset.num_classes}")
        try:
            labels = tuple(dataset.video(video_id).labels for video_id in self.video_ids)
        except ManifestError as err:
            raise EvaluationError(f"Predictions reference a video missing from the manifest: {err}") from err
        return PredictionSet(self.video_ids, self.probs, labels, tuple(dataset.vocabulary.names))


@dataclass(frozen=True)
class ClassAP:
    """AP of one class and its positive count; AP is NaN without positives."""

    class_index: int
    class_name: str
    ap: float
    num_positives: int


@dataclass(frozen=True)
class MapResult:
    """mAP over evaluable classes, the full per-class table and the classes left out for lack of positives."""

    map: float
    per_class: Tuple[ClassAP, ...]
    excluded: Tuple[int, ...]


def _ranked_precisions(scores: np.ndarray, positive: np.ndarray, tie_rank: np.ndarray) -> List[float]:
    """Precision at the rank of every positive, ranking by descending score then ascending id."""
    order = np.lexsort((tie_rank, -scores))
    hits = positive[order]
    ranks = np.flatnonzero(hits) + 1
    return list(np.cumsum(hits)[ranks - 1] / ranks)


def average_precision(scores: Iterable[Tuple[str, float]], positives: Iterable[str]) -> float:
    """Non-interpolated AP of a scored list; ties rank by ascending video id."""
    pairs = list(scores)
    positives = set(positives)
    if not positives:
        raise EvaluationError("Average precision needs at least one positive")
    ids = [video_id for video_id, _ in pairs]
    missing = positives.difference(ids)
    if missing:
        raise EvaluationError(f"Positives without a score: {sorted(missing)}")
    tie_rank = np.argsort(np.argsort(np.asarray(ids, dtype=object), kind="stable"), kind="stable")
    values = np.asarray([score for _, score in pairs], dtype=np.float64)
    positive = np.asarray([video_id in positives for video_id in ids])
    return math.fsum(_ranked_precisions(values, positive, tie_rank)) / len(positives)


def map_eval(preds: PredictionSet, subset: Optional[np.ndarray] = None) -> MapResult:
    """Mean AP over classes that have at least one positive (within ``subset`` when given)."""
    if preds.labels is None:
        raise EvaluationError("Predictions carry no ground truth")
    num_classes = preds.num_classes
    mask = np.ones(num_classes, dtype=bool) if subset is None else np.asarray(subset, dtype=bool)
    if mask.shape != (num_classes,):
        raise EvaluationError(f"Class mask has shape {mask.shape}, expected ({num_classes},)")

    targets = np.zeros((len(preds.video_ids), num_classes), dtype=bool)
    for row, labels in enumerate(preds.labels):
        targets[row, sorted(labels)] = True
    tie_rank = np.argsort(np.argsort(np.asarray(preds.video_ids, dtype=object), kind="stable"), kind="stable")
    names = preds.class_names or tuple(str(index) for index in range(num_classes))

    table: List[ClassAP] = []
    for class_index in range(num_classes):
        positive = targets[:, class_index]
        count = int(positive.sum())
        ap = float("nan")
        if count:
            ap = math.fsum(_ranked_precisions(preds.probs[:, class_index], positive, tie_rank)) / count
        table.append(ClassAP(class_index, names[class_index], ap, count))

    evaluable = [entry for entry in table if mask[entry.class_index] and entry.num_positives]
    excluded = tuple(entry.class_index for entry in table if mask[entry.class_index] and not entry.num_positives)
    if not evaluable:
        raise EvaluationError("No class with a positive video to evaluate")
    if excluded:
        _LOGGER.warning("Excluded %d classes without positives from mAP: %s", len(excluded), list(excluded))
    value = math.fsum(entry.ap for entry in evaluable) / len(evaluable)
    return MapResult(value, tuple(table), excluded)


def ensemble_average(pred_sets: Sequence[PredictionSet]) -> PredictionSet:
    """Per-video, per-class mean of several prediction sets, rows in the first set's order.

    Cells on which all members agree are copied unchanged.
    """
    if not pred_sets:
        raise EvaluationError("Nothing to ensemble")
    reference = pred_sets[0]
    ids = set(reference.video_ids)
    aligned = []
    for member in pred_sets:
        if set(member.video_ids) != ids or member.num_classes != reference.num_classes:
            raise EvaluationError("Ensemble members must cover the same videos and classes")
        rows = {video_id: row for row, video_id in enumerate(member.video_ids)}
        aligned.append(member.probs[[rows[video_id] for video_id in reference.video_ids]])

    stack = np.stack(aligned)
    agree = np.all(stack == stack[0], axis=0)
    probs = np.where(agree, stack[0], np.clip(np.mean(stack, axis=0), 0.0, 1.0))
    _LOGGER.info("Averaged %d prediction sets over %d videos", len(pred_sets), len(reference.video_ids))
    return PredictionSet(reference.video_ids, probs, reference.labels, reference.class_names)


def class_ap_frame(result: MapResult) -> pd.DataFrame:
    """Per-class AP table as a DataFrame."""
    return pd.DataFrame(
        [(entry.class_index, entry.class_name, entry.ap, entry.num_positives) for entry in result.per_class],
        columns=list(CLASS_AP_COLUMNS),
    )


def write_class_ap(path: PathLike, result: MapResult) -> None:
    """Per-class AP CSV (every class; AP empty where the class has no positive)."""
    try:
        class_ap_frame(result).to_csv(path, index=False)
    except OSError as err:
        raise EvaluationError(f"Cannot write per-class AP table {path}: {err}") from err


def read_class_ap(path: PathLike) -> List[ClassAP]:
    """Read a per-class AP CSV."""
    try:
        frame = pd.read_csv(
            path,
            dtype={"class_name": str},
            float_precision="round_trip",
            keep_default_na=False,
            na_values={"ap": [""]},
        )
    except (OSError, ValueError, pd.errors.ParserError) as err:
        raise EvaluationError(f"Cannot read per-class AP table {path}: {err}") from err
    return [
        ClassAP(int(row.class_index), row.class_name, float(row.ap), int(row.num_positives))
        for row in frame.itertuples(index=False)
    ]


def subset_mask(dataset: Dataset, name: Optional[str]) -> Optional[np.ndarray]:
    """Class mask of a named manifest subset, or None for all classes."""
    if name is None:
        return None
    try:
        return dataset.vocabulary.subset_mask(name)
    except ManifestError as err:
        raise EvaluationError(str(err)) from err


def prediction_set(video_ids: Sequence[str], probs: np.ndarray, dataset: Optional[Dataset] = None) -> PredictionSet:
    """PredictionSet over ``video_ids``, with ground truth when ``dataset`` is given."""
    preds = PredictionSet(tuple(video_ids), probs)
    return preds.with_ground_truth(dataset) if dataset is not None else preds


def member_maps(pred_sets: Sequence[PredictionSet], subset: Optional[np.ndarray] = None) -> Mapping[int, float]:
    """mAP of every ensemble member, by position."""
    return {index: map_eval(member, subset).map for index, member in enumerate(pred_sets)}
