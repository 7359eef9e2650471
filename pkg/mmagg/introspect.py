"""Model introspection: zero-pad modality ablation, cluster assignment histograms,
probability timelines, top frames per cluster, and their CSV/JSON/SVG export.

Nothing here writes to the model; every analysis is a pure function of
(model, features, seed).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from .const import DEFAULT_SEED, DEFAULT_TIMELINE_STEP_S, DOMAIN
from .datastore import Dataset, FeatureSequence, VideoRecord, load_video_features
from .exceptions import IntrospectionError
from .model import AggregationModel
from .netvlad import VladParams, soft_assign
from .sampling import SampledInput, sample_segment, seed_for, video_segments

_LOGGER = logging.getLogger(__name__)

PathLike = Union[str, Path]
EXPORT_FORMATS = ("csv", "json", "svg")


@dataclass(frozen=True)
class AblationReport:
    """Ground-truth probability with all modalities and with each modality zero-padded."""

    video_id: str
    class_index: int
    full_probability: float
    padded: Mapping[str, float]
    contributions: Mapping[str, float]


@dataclass(frozen=True)
class AssignmentHistogram:
    """Per-cluster soft-assignment mass over the sampled frames, and the same mass under zero input."""

    video_id: str
    modality: str
    mass: np.ndarray
    frame_count: int
    padded_mass: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        """Per-cluster mass removed by zero padding."""
        return self.mass - self.padded_mass


@dataclass(frozen=True)
class TimelinePoint:
    """Class probability at prefix end ``t``."""

    t: float
    probability: float


@dataclass(frozen=True)
class Timeline:
    """Probability of one class over growing prefixes of a video."""

    video_id: str
    class_index: int
    points: Tuple[TimelinePoint, ...]


@dataclass(frozen=True)
class TopFrame:
    """A frame ranked by its assignment weight to one cluster."""

    video_id: str
    timestamp: float
    alpha: float


def _check_class(model: AggregationModel, class_index: int) -> None:
    """Reject class indices outside the model."""
    if not 0 <= class_index < model.num_classes:
        raise IntrospectionError(f"Class index {class_index} outside [0, {model.num_classes})")


def _check_modality(model: AggregationModel, modality: str) -> None:
    """Reject modalities the model does not have."""
    if modality not in model.vlad:
        raise IntrospectionError(f"Unknown modality {modality!r}; model has {model.modality_names}")


def _features(model: AggregationModel, record: VideoRecord, features) -> Mapping[str, FeatureSequence]:
    """Features given by the caller, else loaded from the record's files."""
    return features if features is not None else load_video_features(record, model.modalities)


def segment_samples(
    model: AggregationModel,
    record: VideoRecord,
    seed: int,
    features: Optional[Mapping[str, FeatureSequence]] = None,
) -> List[SampledInput]:
    """The samples a seeded single prediction pass would draw, one per segment."""
    features = _features(model, record, features)
    return [
        sample_segment(
            segment, features, model.modalities, model.sample_size, seed_for(seed, record.id, segment.index, 0)
        )
        for segment in video_segments(record, features, model.modalities)
    ]


def _mean_probability(model: AggregationModel, samples: Sequence[Mapping[str, np.ndarray]], class_index: int) -> float:
    """Mean probability of ``class_index`` over the per-segment samples."""
    return float(np.mean(np.stack([model.predict(inputs) for inputs in samples]), axis=0)[class_index])


def _zero_padded(inputs: Mapping[str, np.ndarray], modalities: Sequence[str]) -> Dict[str, np.ndarray]:
    """Inputs with every listed modality replaced by zeros of the same shape."""
    return {name: np.zeros_like(array) if name in modalities else array for name, array in inputs.items()}


def modality_contribution(
    model: AggregationModel,
    record: VideoRecord,
    class_index: int,
    seed: int = DEFAULT_SEED,
    features: Optional[Mapping[str, FeatureSequence]] = None,
) -> AblationReport:
    """Contribution of each modality: full probability minus the probability with that modality zeroed.

    The zero matrix keeps the sampled shape and still flows through assignment
    and normalization.
    """
    _check_class(model, class_index)
    samples = [sample.inputs for sample in segment_samples(model, record, seed, features)]
    full = _mean_probability(model, samples, class_index)
    padded = {
        name: _mean_probability(model, [_zero_padded(inputs, [name]) for inputs in samples], class_index)
        for name in model.modality_names
    }
    contributions = {name: full - value for name, value in padded.items()}
    _LOGGER.debug("Ablation of %s class %d: %s", record.id, class_index, contributions)
    return AblationReport(record.id, class_index, full, padded, contributions)


def padded_probability(
    model: AggregationModel, inputs: Mapping[str, np.ndarray], class_index: int, modalities: Sequence[str]
) -> float:
    """Probability of one class for one sample with the listed modalities zeroed."""
    _check_class(model, class_index)
    for name in modalities:
        _check_modality(model, name)
    return float(model.predict(_zero_padded(inputs, modalities))[class_index])


def _float64_vlad(params: VladParams) -> VladParams:
    """VLAD parameters of one modality in float64."""
    return VladParams(
        W=params.W.astype(np.float64),
        b=params.b.astype(np.float64),
        C=params.C.astype(np.float64),
        norm_eps=params.norm_eps,
    )


def assignment_histogram(
    model: AggregationModel,
    record: VideoRecord,
    modality: str,
    seed: int = DEFAULT_SEED,
    features: Optional[Mapping[str, FeatureSequence]] = None,
) -> AssignmentHistogram:
    """Column sums of the soft assignment over every sampled frame of the video (64-bit)."""
    _check_modality(model, modality)
    params = _float64_vlad(model.vlad[modality])
    frames = np.vstack([sample.inputs[modality] for sample in segment_samples(model, record, seed, features)])
    mass = soft_assign(params, frames).sum(axis=0)
    padded_mass = soft_assign(params, np.zeros_like(frames)).sum(axis=0)
    return AssignmentHistogram(record.id, modality, mass, frames.shape[0], padded_mass)


def timeline_times(duration_s: float, step_s: float) -> List[float]:
    """step, 2 * step, ... up to the duration, closed by the duration itself when it is not a multiple."""
    if not step_s > 0:
        raise IntrospectionError(f"Timeline step must be positive, got {step_s}")
    count = int(math.floor(duration_s / step_s + 1e-9))
    times = [step_s * k for k in range(1, count + 1)]
    if not times or times[-1] < duration_s - 1e-9:
        times.append(float(duration_s))
    return times


def probability_timeline(
    model: AggregationModel,
    record: VideoRecord,
    class_index: int,
    step_s: float = DEFAULT_TIMELINE_STEP_S,
    seed: int = DEFAULT_SEED,
    features: Optional[Mapping[str, FeatureSequence]] = None,
) -> Timeline:
    """Probability of a class given only the features with timestamp <= t, for growing t.

    A prefix with at most S rows is used whole; a longer one is sampled to S
    rows. A modality with no rows yet contributes one zero row.
    """
    _check_class(model, class_index)
    features = _features(model, record, features)
    points = []
    for k, t in enumerate(timeline_times(record.duration_s, step_s)):
        rng = seed_for(seed, record.id, k, 0)
        inputs = {}
        for spec in model.modalities:
            seq = features[spec.name]
            available = int(np.searchsorted(seq.timestamps(), t, side="right"))
            if available == 0:
                inputs[spec.name] = np.zeros((1, spec.dim))
            elif available <= model.sample_size:
                inputs[spec.name] = seq.data[:available]
            else:
                picks = np.sort(rng.choice(available, size=model.sample_size, replace=False))
                inputs[spec.name] = seq.data[picks]
        points.append(TimelinePoint(float(t), float(model.predict(inputs)[class_index])))
    return Timeline(record.id, class_index, tuple(points))


def top_frames_for_cluster(
    model: AggregationModel,
    dataset: Dataset,
    modality: str,
    cluster: int,
    n: int,
    seed: Optional[int] = DEFAULT_SEED,
    split: Optional[str] = None,
) -> List[TopFrame]:
    """The n frames with the largest assignment to one cluster, ties by (video id, timestamp).

    With a seed, only the frames a seeded prediction pass samples are scanned;
    with ``seed=None`` every frame is.
    """
    _check_modality(model, modality)
    params = _float64_vlad(model.vlad[modality])
    if not 0 <= cluster < params.clusters:
        raise IntrospectionError(f"Cluster {cluster} outside [0, {params.clusters})")
    if n < 1:
        raise IntrospectionError(f"Need n >= 1, got {n}")
    records = dataset.split(split)
    if not records:
        raise IntrospectionError("Dataset has no videos to scan")

    candidates: List[TopFrame] = []
    for record in records:
        features = load_video_features(record, model.modalities)
        seq = features[modality]
        if seed is None:
            rows = np.arange(seq.count)
        else:
            picked = [sample.indices[modality] for sample in segment_samples(model, record, seed, features)]
            rows = np.unique(np.concatenate(picked))
        if rows.size == 0:
            continue
        alpha = soft_assign(params, seq.data[rows])[:, cluster]
        stamps = rows / seq.fps
        candidates.extend(TopFrame(record.id, float(t), float(a)) for t, a in zip(stamps, alpha))

    candidates.sort(key=lambda frame: (-frame.alpha, frame.video_id, frame.timestamp))
    return candidates[:n]


def _report_rows(report: Any) -> List[Dict[str, Any]]:
    """Flat table rows of a report."""
    if isinstance(report, AblationReport):
        return [
            {
                "video_id": report.video_id,
                "class_index": report.class_index,
                "full_probability": report.full_probability,
                "modality": name,
                "padded_probability": report.padded[name],
                "contribution": report.contributions[name],
            }
            for name in report.padded
        ]
    if isinstance(report, AssignmentHistogram):
        return [
            {
                "video_id": report.video_id,
                "modality": report.modality,
                "cluster": k,
                "mass": float(report.mass[k]),
                "padded_mass": float(report.padded_mass[k]),
                "delta": float(report.delta[k]),
                "frame_count": report.frame_count,
            }
            for k in range(report.mass.shape[0])
        ]
    if isinstance(report, Timeline):
        return [
            {"video_id": report.video_id, "class_index": report.class_index, "t": p.t, "probability": p.probability}
            for p in report.points
        ]
    if isinstance(report, TopFrame):
        return [asdict(report)]
    raise IntrospectionError(f"Cannot export report of type {type(report).__name__}")


def _report_json(report: Any) -> Dict[str, Any]:
    """JSON-ready form of a report."""
    if isinstance(report, AssignmentHistogram):
        return {
            "video_id": report.video_id,
            "modality": report.modality,
            "frame_count": report.frame_count,
            "mass": report.mass.tolist(),
            "padded_mass": report.padded_mass.tolist(),
            "delta": report.delta.tolist(),
        }
    if isinstance(report, (AblationReport, Timeline, TopFrame)):
        return json.loads(json.dumps(asdict(report)))
    raise IntrospectionError(f"Cannot export report of type {type(report).__name__}")


def _bar_values(report: Any) -> Tuple[List[str], List[float], str, str]:
    """(labels, heights, x label, y label) of the bar chart for a report."""
    if isinstance(report, AssignmentHistogram):
        labels = [str(k) for k in range(report.mass.shape[0])]
        return labels, report.mass.tolist(), f"{report.modality} cluster", "assignment mass"
    if isinstance(report, AblationReport):
        return list(report.contributions), list(report.contributions.values()), "modality", "contribution"
    raise IntrospectionError(f"No bar chart for {type(report).__name__}")


def _render_svg(reports: Sequence[Any], path: PathLike) -> None:
    """Bar or line chart of a report as SVG."""
    if isinstance(reports[0], TopFrame):
        reports = [reports]
    fig = Figure(figsize=(6.4, 3.2 * len(reports)))
    axes = fig.subplots(len(reports), 1, squeeze=False)[:, 0]
    bar_index = 0
    for ax, report in zip(axes, reports):
        if isinstance(report, Timeline):
            ax.plot([p.t for p in report.points], [p.probability for p in report.points], marker="o")
            ax.set_xlabel("time (s)")
            ax.set_ylabel(f"probability of class {report.class_index}")
            ax.set_title(report.video_id)
            continue
        if isinstance(report, list):
            labels = [f"{frame.video_id}@{frame.timestamp:g}" for frame in report]
            heights = [frame.alpha for frame in report]
            xlabel, ylabel = "frame", "assignment"
        else:
            labels, heights, xlabel, ylabel = _bar_values(report)
            ax.set_title(report.video_id)
        bars = ax.bar(range(len(heights)), heights)
        for patch in bars.patches:
            patch.set_gid(f"bar-{bar_index}")
            bar_index += 1
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45 if len(labels) > 8 else 0)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": DOMAIN}):
        fig.savefig(path, format="svg", metadata={"Date": None})


def export_reports(reports: Sequence[Any], path: PathLike, fmt: str) -> None:
    """Write reports as a flat CSV table, a JSON list, or an SVG chart (bars for histograms,
    contributions and top frames; lines for timelines)."""
    if not reports:
        raise IntrospectionError("No reports to export")
    if fmt not in EXPORT_FORMATS:
        raise IntrospectionError(f"Unknown export format {fmt!r}; expected one of {EXPORT_FORMATS}")
    try:
        if fmt == "csv":
            rows = [row for report in reports for row in _report_rows(report)]
            pd.DataFrame(rows).to_csv(path, index=False)
        elif fmt == "json":
            payload = [_report_json(report) for report in reports]
            Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        else:
            _render_svg(list(reports), path)
    except OSError as err:
        raise IntrospectionError(f"Cannot write report {path}: {err}") from err
    _LOGGER.info("Exported %d reports to %s (%s)", len(reports), path, fmt)


def read_ablation_csv(path: PathLike) -> List[AblationReport]:
    """Parse ablation reports back from :func:`export_reports` CSV output."""
    try:
        frame = pd.read_csv(path, dtype={"video_id": str, "modality": str}, float_precision="round_trip")
    except (OSError, ValueError, pd.errors.ParserError) as err:
        raise IntrospectionError(f"Cannot read ablation table {path}: {err}") from err
    reports = []
    for (video_id, class_index), group in frame.groupby(["video_id", "class_index"], sort=False):
        reports.append(
            AblationReport(
                video_id=video_id,
                class_index=int(class_index),
                full_probability=float(group["full_probability"].iloc[0]),
                padded=dict(zip(group["modality"], group["padded_probability"].astype(float))),
                contributions=dict(zip(group["modality"], group["contribution"].astype(float))),
            )
        )
    return reports
