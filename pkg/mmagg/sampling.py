"""Ten-minute segmentation, seeded frame sampling and repeated test averaging."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .const import DEFAULT_REPEATS, DEFAULT_SEED, SEGMENT_SECONDS
from .datastore import FeatureSequence, ModalitySpec, VideoRecord, load_video_features
from .exceptions import ShapeError
from .model import AggregationModel, MapFn

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class Segment:
    """A slice [start_s, end_s) of one video with the row range [lo, hi) of every modality."""

    video_id: str
    index: int
    start_s: float
    end_s: float
    ranges: Mapping[str, Tuple[int, int]]

    def count(self, modality: str) -> int:
        """Rows of ``modality`` in this segment."""
        lo, hi = self.ranges[modality]
        return hi - lo


@dataclass(frozen=True)
class SampledInput:
    """Exactly S rows per modality plus the ascending source row indices they came from."""

    inputs: Mapping[str, np.ndarray]
    indices: Mapping[str, np.ndarray]


def seed_for(base_seed: int, video_id: str, segment_index: int, epoch: int) -> np.random.Generator:
    """Independent PCG64 stream for one (seed, video, segment, epoch) combination."""
    if base_seed < 0 or segment_index < 0 or epoch < 0:
        raise ValueError("Seeds, segment indices and epochs must be non-negative")
    video_hash = int.from_bytes(hashlib.blake2b(video_id.encode("utf-8"), digest_size=8).digest(), "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([base_seed, video_hash, segment_index, epoch])))


def segment_bounds(duration_s: float) -> List[Tuple[float, float]]:
    """(start, end) of ceil(duration / 600) consecutive segments; the last may be shorter."""
    if not duration_s > 0:
        raise ShapeError(f"Duration must be positive, got {duration_s}")
    count = max(1, math.ceil(duration_s / SEGMENT_SECONDS))
    return [(index * SEGMENT_SECONDS, min((index + 1) * SEGMENT_SECONDS, duration_s)) for index in range(count)]


def segment_video(
    record: VideoRecord,
    modalities: Sequence[ModalitySpec],
    counts: Optional[Mapping[str, int]] = None,
) -> List[Segment]:
    """Split a video into segments and assign every feature row to exactly one of them.

    Row i of a modality at ``fps`` falls in a segment when start <= i / fps < end.
    Rows at or past the video's duration go to the last segment. ``counts`` gives
    the actual row count per modality; the rate-implied count is used otherwise.
    """
    bounds = segment_bounds(record.duration_s)
    edges: Dict[str, np.ndarray] = {}
    for spec in modalities:
        count = counts[spec.name] if counts is not None else spec.expected_count(record.duration_s)
        timestamps = np.arange(count, dtype=np.float64) / spec.fps
        cuts = np.searchsorted(timestamps, [start for start, _ in bounds[1:]], side="left")
        edges[spec.name] = np.concatenate(([0], cuts, [count])).astype(np.int64)

    return [
        Segment(
            video_id=record.id,
            index=index,
            start_s=start,
            end_s=end,
            ranges={name: (int(cuts[index]), int(cuts[index + 1])) for name, cuts in edges.items()},
        )
        for index, (start, end) in enumerate(bounds)
    ]


def sample_frames(segment: Segment, modality: ModalitySpec, sample_size: int, rng: np.random.Generator) -> np.ndarray:
    """S ascending row indices drawn from the segment, without replacement when it has at least S rows."""
    if sample_size < 1:
        raise ShapeError(f"Sample size must be >= 1, got {sample_size}")
    lo, hi = segment.ranges[modality.name]
    available = hi - lo
    if available < 1:
        raise ShapeError(f"Segment {segment.index} of {segment.video_id!r} has no {modality.name!r} rows")
    if available >= sample_size:
        picks = rng.choice(available, size=sample_size, replace=False)
    else:
        _LOGGER.debug(
            "Segment %d of %s has %d %s rows < %d, sampling with replacement",
            segment.index,
            segment.video_id,
            available,
            modality.name,
            sample_size,
        )
        picks = rng.integers(0, available, size=sample_size)
    return np.sort(picks).astype(np.int64) + lo


def sample_segment(
    segment: Segment,
    features: Mapping[str, FeatureSequence],
    modalities: Sequence[ModalitySpec],
    sample_size: int,
    rng: np.random.Generator,
) -> SampledInput:
    """Draw every modality's sample from ``rng`` in modality order."""
    inputs, indices = {}, {}
    for spec in modalities:
        picks = sample_frames(segment, spec, sample_size, rng)
        indices[spec.name] = picks
        inputs[spec.name] = features[spec.name].data[picks]
    return SampledInput(inputs, indices)


def video_segments(
    record: VideoRecord, features: Mapping[str, FeatureSequence], modalities: Sequence[ModalitySpec]
) -> List[Segment]:
    """Segments of a loaded video, using the actual row counts of its feature files.

    A segment left without rows for some modality (a file one row short of the
    rate-implied count, say) is folded into the segment before it.
    """
    segments = segment_video(record, modalities, {spec.name: features[spec.name].count for spec in modalities})
    merged = segments[:1]
    for segment in segments[1:]:
        if all(segment.count(spec.name) > 0 for spec in modalities):
            merged.append(replace(segment, index=len(merged)))
            continue
        previous = merged[-1]
        _LOGGER.debug(
            "Segment %d of %s has an empty modality, merged into segment %d", segment.index, record.id, previous.index
        )
        merged[-1] = replace(
            previous,
            end_s=segment.end_s,
            ranges={name: (lo, segment.ranges[name][1]) for name, (lo, _) in previous.ranges.items()},
        )
    return merged


def single_pass(
    model: AggregationModel,
    record: VideoRecord,
    seed: int,
    features: Optional[Mapping[str, FeatureSequence]] = None,
) -> np.ndarray:
    """One seeded forward pass per segment, averaged uniformly into a video-level vector."""
    if features is None:
        features = load_video_features(record, model.modalities)
    segments = video_segments(record, features, model.modalities)
    outputs = []
    for segment in segments:
        rng = seed_for(seed, record.id, segment.index, 0)
        sample = sample_segment(segment, features, model.modalities, model.sample_size, rng)
        outputs.append(model.predict(sample.inputs))
    return np.mean(np.stack(outputs), axis=0)


def repeated_eval_average(
    model: AggregationModel,
    record: VideoRecord,
    repeats: int = DEFAULT_REPEATS,
    base_seed: int = DEFAULT_SEED,
    features: Optional[Mapping[str, FeatureSequence]] = None,
) -> np.ndarray:
    """Mean of ``repeats`` single passes seeded base_seed, base_seed + 1, ..."""
    if repeats < 1:
        raise ShapeError(f"Repeats must be >= 1, got {repeats}")
    if features is None:
        features = load_video_features(record, model.modalities)
    passes = [single_pass(model, record, base_seed + repeat, features) for repeat in range(repeats)]
    return np.mean(np.stack(passes), axis=0)


def predict_videos(
    model: AggregationModel,
    records: Iterable[VideoRecord],
    repeats: int = DEFAULT_REPEATS,
    base_seed: int = DEFAULT_SEED,
    map_fn: MapFn = map,
) -> np.ndarray:
    """V x C matrix of repeated-average predictions, rows in ``records`` order."""
    records = list(records)

    def _predict(record):
        return repeated_eval_average(model, record, repeats, base_seed)

    rows = list(map_fn(_predict, records))
    _LOGGER.info("Predicted %d videos with %d repeats", len(rows), repeats)
    return np.stack(rows) if rows else np.zeros((0, model.num_classes))
