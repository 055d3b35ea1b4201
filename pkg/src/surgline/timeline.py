"""Smoothed surgical timelines and narrative reports from frame predictions.

A per-frame top-1 label stream is majority-vote smoothed, run-length
encoded into contiguous segments whose boundaries sit at inter-frame
midpoints, and rendered three ways: structured JSON, a plain-text
narrative ("[HH:MM:SS–HH:MM:SS] <canonical description>" per segment),
and a phase-diagram CSV aligning the prediction ribbon with ground truth
on a shared time grid.

The smoothing window and boundary conventions are artifact choices, not
properties of the underlying model; defaults are documented on each
function.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from surgline.ingest import FrameRecord
from surgline.vocab import ClassVocabulary, narrative_for
from surgline.zeroshot import Prediction

NARRATIVE_RANGE = "[{start}–{end}]"


def smooth_labels(labels: Sequence[str], window: int) -> list[str]:
    """Sliding-window majority vote over an ordered label stream.

    The window is centered and truncated at the edges. Ties resolve to the
    previous smoothed label when it is among the tied candidates (temporal
    stickiness); otherwise, and at the first position, to the tied label
    occurring earliest in the window. ``window`` must be odd so "majority"
    is well defined; window 1 is the identity.
    """
    if not labels:
        raise ValueError("empty label stream")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 1, got {window}")
    labels = list(labels)
    if window == 1:
        return labels
    half = window // 2
    out: list[str] = []
    for i in range(len(labels)):
        chunk = labels[max(0, i - half) : i + half + 1]
        counts = Counter(chunk)
        best = max(counts.values())
        tied = [label for label, c in counts.items() if c == best]
        if len(tied) == 1:
            out.append(tied[0])
            continue
        prev = out[-1] if out else None
        if prev in tied:
            out.append(prev)
        else:
            out.append(next(label for label in chunk if label in tied))
    return out


class MajorityVoteSmoother(TransformerMixin, BaseEstimator):
    """Estimator-shaped wrapper around ``smooth_labels``."""

    def __init__(self, window: int = 11):
        self.window = window

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> list[str]:
        return smooth_labels(list(X), self.window)


@dataclass(frozen=True)
class TimelineSegment:
    """Half-open stretch of one class between two boundary times."""

    class_id: str
    start_s: float
    end_s: float
    mean_confidence: float
    frame_span: tuple[int, int]

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise ValueError(
                f"segment for {self.class_id} has non-positive duration "
                f"({self.start_s} to {self.end_s})"
            )

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class Timeline:
    """Contiguous, gap-free segment sequence for one video."""

    video_id: str
    segments: tuple[TimelineSegment, ...]
    narrative: tuple[str, ...]

    def __post_init__(self):
        for a, b in zip(self.segments, self.segments[1:]):
            if abs(a.end_s - b.start_s) > 1e-9:
                raise ValueError(
                    f"gap between segments at {a.end_s} and {b.start_s}"
                )
            if a.class_id == b.class_id:
                raise ValueError(f"adjacent segments share class {a.class_id}")

    @property
    def start_s(self) -> float:
        return self.segments[0].start_s

    @property
    def end_s(self) -> float:
        return self.segments[-1].end_s

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def label_at(self, t: float) -> str:
        """Class covering time ``t``; the final segment includes its end."""
        if not self.start_s <= t <= self.end_s:
            raise ValueError(f"time {t} outside timeline span")
        for seg in self.segments:
            if t < seg.end_s:
                return seg.class_id
        return self.segments[-1].class_id


def format_hms(seconds: float) -> str:
    """Clock format HH:MM:SS, rounded to the nearest second."""
    total = int(round(seconds))
    if total < 0:
        raise ValueError(f"negative time {seconds}")
    h, rem = divmod(total, 3600)
    m, s = divmod(rem, 60)
    return f"{h:02d}:{m:02d}:{s:02d}"


def _narrative_line(seg: TimelineSegment, vocab: ClassVocabulary) -> str:
    rng = NARRATIVE_RANGE.format(
        start=format_hms(seg.start_s), end=format_hms(seg.end_s)
    )
    return f"{rng} {narrative_for(vocab, seg.class_id)}"


def build_timeline(
    frames: Sequence[FrameRecord],
    preds: Sequence[Prediction],
    vocab: ClassVocabulary,
    window: int = 11,
) -> Timeline:
    """Run-length encode smoothed top-1 labels into a timeline.

    Frames and predictions must be aligned one-to-one and strictly
    time-ordered; at least two frames are needed to span time. Segment
    boundaries fall at midpoints between adjacent sampled frames; the
    first and last boundaries are the first and last frame times. Each
    segment's confidence is the mean top-1 score of its frames.
    """
    if len(frames) != len(preds):
        raise ValueError(f"{len(frames)} frames but {len(preds)} predictions")
    if len(frames) < 2:
        raise ValueError("need at least 2 frames to build a timeline")
    video_ids = {f.video_id for f in frames}
    if len(video_ids) != 1:
        raise ValueError(f"frames span multiple videos: {sorted(video_ids)}")
    for f, p in zip(frames, preds):
        if f.video_id != p.video_id or f.frame_index != p.frame_index:
            raise ValueError(
                f"misaligned inputs at frame {f.frame_index} vs "
                f"prediction {p.frame_index}"
            )
    times = [f.timestamp_s for f in frames]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("frames are not strictly time-ordered")

    smoothed = smooth_labels([p.labels[0] for p in preds], window)
    confidences = [p.scores[0] for p in preds]

    # run-length encode into [start_idx, end_idx] runs
    runs: list[tuple[int, int, str]] = []
    start = 0
    for i in range(1, len(smoothed) + 1):
        if i == len(smoothed) or smoothed[i] != smoothed[start]:
            runs.append((start, i - 1, smoothed[start]))
            start = i

    def boundary(i: int, j: int) -> float:
        return (times[i] + times[j]) / 2.0

    segments = []
    for ri, (a, b, label) in enumerate(runs):
        start_s = times[0] if ri == 0 else boundary(a - 1, a)
        end_s = times[-1] if ri == len(runs) - 1 else boundary(b, b + 1)
        segments.append(
            TimelineSegment(
                class_id=label,
                start_s=start_s,
                end_s=end_s,
                mean_confidence=float(np.mean(confidences[a : b + 1])),
                frame_span=(frames[a].frame_index, frames[b].frame_index),
            )
        )
    narrative = tuple(_narrative_line(seg, vocab) for seg in segments)
    return Timeline(
        video_id=frames[0].video_id, segments=tuple(segments), narrative=narrative
    )


def timeline_from_truth(
    frames: Sequence[FrameRecord], vocab: ClassVocabulary
) -> Timeline:
    """Ground-truth timeline: each frame votes its true label, no smoothing."""
    preds = [
        Prediction(
            video_id=f.video_id,
            frame_index=f.frame_index,
            timestamp_s=f.timestamp_s,
            true_label=f.label,
            labels=(f.label,),
            scores=(1.0,),
        )
        for f in frames
    ]
    return build_timeline(frames, preds, vocab, window=1)


# ---------------------------------------------------------------------------
# Phase diagram


@dataclass(frozen=True)
class PhaseDiagram:
    """Prediction and truth ribbons on a shared time grid."""

    times: tuple[float, ...]
    predicted: tuple[str, ...]
    truth: tuple[str, ...]
    agreement_per_class: dict[str, float | None]
    overall_agreement: float


def export_phase_diagram(
    predicted: Timeline,
    truth: Timeline,
    times: Sequence[float] | None = None,
    n_samples: int = 200,
) -> PhaseDiagram:
    """Sample both timelines on one grid and measure agreement.

    The two timelines must cover the same span (within 1e-6 s). By default
    the grid is ``n_samples`` evenly spaced points across the span; pass
    the original frame timestamps as ``times`` to make the overall
    agreement equal the frame-level post-smoothing accuracy.

    Per-class agreement is, among grid points whose truth is that class,
    the fraction where the prediction matches (None for classes absent
    from the truth ribbon).
    """
    if (
        abs(predicted.start_s - truth.start_s) > 1e-6
        or abs(predicted.end_s - truth.end_s) > 1e-6
    ):
        raise ValueError(
            f"span mismatch: predicted [{predicted.start_s}, {predicted.end_s}] "
            f"vs truth [{truth.start_s}, {truth.end_s}]"
        )
    if times is None:
        grid = np.linspace(predicted.start_s, predicted.end_s, n_samples)
    else:
        grid = np.asarray(list(times), dtype=np.float64)
        if grid.size == 0:
            raise ValueError("empty time grid")
    # clamp against float fuzz at the ends
    grid = np.clip(grid, max(predicted.start_s, truth.start_s),
                   min(predicted.end_s, truth.end_s))

    pred_labels = tuple(predicted.label_at(t) for t in grid)
    true_labels = tuple(truth.label_at(t) for t in grid)
    matches = np.array([a == b for a, b in zip(pred_labels, true_labels)])

    agreement: dict[str, float | None] = {}
    for cid in sorted(set(true_labels) | set(pred_labels)):
        sel = np.array([t == cid for t in true_labels])
        agreement[cid] = float(matches[sel].mean()) if sel.any() else None
    return PhaseDiagram(
        times=tuple(float(t) for t in grid),
        predicted=pred_labels,
        truth=true_labels,
        agreement_per_class=agreement,
        overall_agreement=float(matches.mean()),
    )


# ---------------------------------------------------------------------------
# Serialization


def timeline_to_json(timeline: Timeline) -> dict:
    return {
        "video_id": timeline.video_id,
        "segments": [
            {
                "class": seg.class_id,
                "start_s": seg.start_s,
                "end_s": seg.end_s,
                "confidence": seg.mean_confidence,
            }
            for seg in timeline.segments
        ],
        "narrative": list(timeline.narrative),
    }


def write_timeline_json(timeline: Timeline, path: str | Path) -> None:
    Path(path).write_text(json.dumps(timeline_to_json(timeline), indent=2) + "\n")


def narrative_text(timeline: Timeline) -> str:
    """Plain-text report: summary header plus one narrative line per segment."""
    distinct = len({seg.class_id for seg in timeline.segments})
    lines = [
        f"video: {timeline.video_id}",
        f"segments: {len(timeline.segments)}",
        f"distinct_classes: {distinct}",
        f"duration: {format_hms(timeline.duration_s)}",
        "",
    ]
    lines.extend(timeline.narrative)
    return "\n".join(lines) + "\n"


def write_narrative(timeline: Timeline, path: str | Path) -> None:
    Path(path).write_text(narrative_text(timeline))


def write_phase_diagram_csv(diagram: PhaseDiagram, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "predicted", "truth"])
        for t, p, tr in zip(diagram.times, diagram.predicted, diagram.truth):
            writer.writerow([f"{t:.6f}", p, tr])
