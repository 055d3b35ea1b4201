"""Annotation parsing, frame sampling, video-level splits, and class balancing.

File formats:

* gesture transcript: plain text, one ``start_frame end_frame Gk`` triple per
  line, intervals inclusive on both ends;
* phase annotation: TSV with header ``Frame<TAB>Phase`` and one row per
  source frame;
* dataset manifest: JSON listing videos
  ``{video_id, path, fps, frame_count, annotation, task}``;
* split file: JSON ``{"train": [...], "val": [...], "test": [...], "seed": n}``.

Splits are made at the video level so that no video contributes frames to
two splits. Balancing is intended for the training split only; validation
and test keep their natural class distribution.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from surgline.vocab import TASK_CLASS_IDS

logger = logging.getLogger(__name__)

_GESTURE_CODE_RE = re.compile(r"^G[0-9]+$")


class AnnotationError(ValueError):
    """An annotation file is malformed."""


class SplitError(ValueError):
    """A requested dataset split cannot be built."""


@dataclass(frozen=True)
class VideoMeta:
    """Source video description (real file or synthetic)."""

    video_id: str
    fps: float
    frame_count: int
    source: str = ""

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError(f"{self.video_id}: fps must be positive, got {self.fps}")
        if self.frame_count < 0:
            raise ValueError(f"{self.video_id}: negative frame_count")


@dataclass
class FrameRecord:
    """One sampled, labeled frame with provenance.

    ``image`` is an opaque handle: decoded pixels (ndarray), a zero-argument
    loader callable, or None when pixels are not needed.
    """

    video_id: str
    frame_index: int
    timestamp_s: float
    label: str
    image: Any = None


def load_image(record: FrameRecord) -> np.ndarray:
    """Resolve a record's image handle to decoded pixels."""
    img = record.image
    if callable(img):
        img = img()
    if img is None:
        raise ValueError(
            f"{record.video_id}[{record.frame_index}]: record has no image data"
        )
    return np.asarray(img)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint video-level train/val/test sets."""

    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]
    seed: int = 0

    def __post_init__(self):
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            overlap = getattr(self, a) & getattr(self, b)
            if overlap:
                raise SplitError(f"{a}/{b} overlap: {sorted(overlap)}")

    @property
    def all_videos(self) -> frozenset[str]:
        return self.train | self.val | self.test

    def part_of(self, video_id: str) -> str:
        for name in ("train", "val", "test"):
            if video_id in getattr(self, name):
                return name
        raise KeyError(f"video {video_id!r} not in split")

    def to_json(self) -> dict:
        return {
            "train": sorted(self.train),
            "val": sorted(self.val),
            "test": sorted(self.test),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSplit":
        return cls(
            train=frozenset(obj["train"]),
            val=frozenset(obj["val"]),
            test=frozenset(obj["test"]),
            seed=int(obj.get("seed", 0)),
        )


def save_split(split: DatasetSplit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split.to_json(), indent=2) + "\n")


def load_split(path: str | Path) -> DatasetSplit:
    return DatasetSplit.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Annotation parsing


def parse_gesture_transcript(
    path: str | Path,
    video: VideoMeta,
    valid_codes: Sequence[str] = TASK_CLASS_IDS["gesture"],
) -> list[tuple[int, int, str]]:
    """Parse a gesture transcript into ``(start_frame, end_frame, code)`` triples.

    Intervals are inclusive, sorted by start frame, and must not overlap.
    Frames outside every interval are unlabeled and dropped downstream.
    """
    valid = set(valid_codes)
    intervals = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise AnnotationError(
                f"{path}:{lineno}: expected 'start end Gk', got {line.strip()!r}"
            )
        try:
            start, end = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise AnnotationError(f"{path}:{lineno}: non-integer frame bound") from exc
        code = parts[2]
        if not _GESTURE_CODE_RE.match(code) or code not in valid:
            raise AnnotationError(f"{path}:{lineno}: unknown gesture code {code!r}")
        if start < 0 or end < start or end >= video.frame_count:
            raise AnnotationError(
                f"{path}:{lineno}: interval ({start}, {end}) outside frames "
                f"[0, {video.frame_count - 1}] of {video.video_id}"
            )
        intervals.append((start, end, code))
    intervals.sort(key=lambda t: t[0])
    for (s0, e0, _), (s1, _, _) in zip(intervals, intervals[1:]):
        if s1 <= e0:
            raise AnnotationError(
                f"{path}: overlapping intervals near frames {s0}-{e0} and {s1}-..."
            )
    return intervals


def labels_from_intervals(
    intervals: Sequence[tuple[int, int, str]], frame_count: int
) -> list[str | None]:
    """Expand inclusive intervals to a per-frame label array (None = unlabeled)."""
    labels: list[str | None] = [None] * frame_count
    for start, end, code in intervals:
        for i in range(start, end + 1):
            labels[i] = code
    return labels


def default_phase_name_map() -> dict[str, str]:
    """Bundled mapping from annotation phase names to P-codes."""
    ref = resources.files("surgline.data").joinpath("cholec80_phase_names.json")
    return dict(json.loads(ref.read_text(encoding="utf-8"))["name_map"])


def parse_phase_annotation(
    path: str | Path,
    video: VideoMeta,
    name_map: dict[str, str] | None = None,
    on_mismatch: str = "error",
) -> list[str]:
    """Parse a per-frame phase TSV into a label array of length frame_count.

    ``on_mismatch`` controls what happens when the row count differs from
    the video's frame count: ``"error"`` raises, ``"truncate"`` logs and
    keeps ``min(rows, frame_count)`` labels (missing tail rows raise either
    way, since that would leave frames unlabeled).
    """
    if name_map is None:
        name_map = default_phase_name_map()
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split("\t")[:2] != ["Frame", "Phase"]:
        raise AnnotationError(f"{path}: expected header 'Frame<TAB>Phase'")
    labels: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise AnnotationError(f"{path}:{lineno}: expected 'frame<TAB>phase'")
        frame_str, name = parts
        try:
            frame = int(frame_str)
        except ValueError as exc:
            raise AnnotationError(f"{path}:{lineno}: non-integer frame index") from exc
        if frame != len(labels):
            raise AnnotationError(
                f"{path}:{lineno}: frame index {frame} out of order "
                f"(expected {len(labels)})"
            )
        if name not in name_map:
            raise AnnotationError(f"{path}:{lineno}: unmapped phase name {name!r}")
        labels.append(name_map[name])
    if len(labels) != video.frame_count:
        msg = (
            f"{path}: {len(labels)} annotation rows but {video.frame_count} "
            f"frames in {video.video_id}"
        )
        if on_mismatch == "truncate" and len(labels) > video.frame_count:
            logger.warning("%s; truncating", msg)
            labels = labels[: video.frame_count]
        else:
            raise AnnotationError(msg)
    return labels


# ---------------------------------------------------------------------------
# Frame sampling


@dataclass
class SampledFrames:
    """Frames kept by stride sampling plus the resulting effective rate."""

    records: list[FrameRecord]
    effective_fps: float
    stride: int


def sample_frames(
    video: VideoMeta,
    labels: Sequence[str | None],
    stride: int,
    image_source: Callable[[int], Any] | None = None,
) -> SampledFrames:
    """Keep labeled frames whose index is a multiple of ``stride``.

    ``image_source(frame_index)`` supplies the image handle for a kept frame;
    when omitted, records carry no pixels (enough for splits and metrics).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if len(labels) != video.frame_count:
        raise ValueError(
            f"{video.video_id}: {len(labels)} labels for {video.frame_count} frames"
        )
    records = []
    for idx in range(0, video.frame_count, stride):
        label = labels[idx]
        if label is None:
            continue
        image = image_source(idx) if image_source is not None else None
        records.append(
            FrameRecord(
                video_id=video.video_id,
                frame_index=idx,
                timestamp_s=idx / video.fps,
                label=label,
                image=image,
            )
        )
    return SampledFrames(records=records, effective_fps=video.fps / stride, stride=stride)


# ---------------------------------------------------------------------------
# Splits


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [n * r for r in ratios]
    counts = [int(q) for q in quotas]
    rema = sorted(range(len(ratios)), key=lambda i: quotas[i] - counts[i], reverse=True)
    for i in rema[: n - sum(counts)]:
        counts[i] += 1
    return counts


def make_split(
    videos: Sequence[str],
    spec: tuple[float, float, float] | tuple[int, int, int] = (0.6, 0.1, 0.3),
    seed: int = 0,
) -> DatasetSplit:
    """Build a disjoint video-level train/val/test split, deterministic per seed.

    ``spec`` is either three ratios (summing to 1) or three absolute counts
    (summing to the number of videos). With ratios, rounding uses largest
    remainder and every split is kept non-empty when >= 3 videos exist,
    topping up validation first.
    """
    videos = list(videos)
    if len(set(videos)) != len(videos):
        raise SplitError("duplicate video ids")
    n = len(videos)
    if n == 0:
        raise SplitError("no videos to split")
    if all(isinstance(x, (int, np.integer)) and not isinstance(x, bool) for x in spec):
        counts = [int(x) for x in spec]
        if any(c < 0 for c in counts):
            raise SplitError(f"negative count in {spec}")
        if sum(counts) != n:
            raise SplitError(
                f"counts {tuple(counts)} infeasible for {n} videos "
                f"(sum {sum(counts)} != {n})"
            )
    else:
        ratios = [float(x) for x in spec]
        if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
            raise SplitError(f"ratios {spec} must be non-negative and sum to 1")
        counts = _largest_remainder(n, ratios)
        if n >= 3 and 0 in counts:
            # top up empty splits (val first) from the largest one
            for i in (1, 2, 0):
                while counts[i] == 0:
                    donor = max(range(3), key=lambda j: counts[j])
                    counts[donor] -= 1
                    counts[i] += 1
    rng = np.random.default_rng(seed)
    order = [videos[i] for i in rng.permutation(n)]
    train = order[: counts[0]]
    val = order[counts[0] : counts[0] + counts[1]]
    test = order[counts[0] + counts[1] :]
    return DatasetSplit(
        train=frozenset(train), val=frozenset(val), test=frozenset(test), seed=seed
    )


def split_records(
    records: Sequence[FrameRecord], split: DatasetSplit
) -> dict[str, list[FrameRecord]]:
    """Partition frame records by their video's split; order preserved."""
    out: dict[str, list[FrameRecord]] = {"train": [], "val": [], "test": []}
    for rec in records:
        out[split.part_of(rec.video_id)].append(rec)
    return out


# ---------------------------------------------------------------------------
# Class balancing


def class_counts(records: Sequence[FrameRecord]) -> Counter:
    return Counter(rec.label for rec in records)


def balance_upsample(records: Sequence[FrameRecord], seed: int = 0) -> list[FrameRecord]:
    """Match every class to the maximum class frequency by resampling.

    Original records are kept in order; duplicates are drawn with
    replacement from each class's own records and appended, deterministic
    per seed.
    """
    if not records:
        raise ValueError("cannot balance an empty record list")
    counts = class_counts(records)
    target = max(counts.values())
    by_class: dict[str, list[FrameRecord]] = {}
    for rec in records:
        by_class.setdefault(rec.label, []).append(rec)
    rng = np.random.default_rng(seed)
    out = list(records)
    for label in sorted(by_class):
        pool = by_class[label]
        deficit = target - len(pool)
        if deficit > 0:
            picks = rng.integers(0, len(pool), size=deficit)
            out.extend(pool[i] for i in picks)
    return out


def balance_downsample(records: Sequence[FrameRecord], seed: int = 0) -> list[FrameRecord]:
    """Match every class to the minimum class frequency by dropping records.

    The result is a subset of the input (as a multiset), in input order,
    deterministic per seed.
    """
    if not records:
        raise ValueError("cannot balance an empty record list")
    counts = class_counts(records)
    target = min(counts.values())
    indices_by_class: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        indices_by_class.setdefault(rec.label, []).append(i)
    rng = np.random.default_rng(seed)
    keep: set[int] = set()
    for label in sorted(indices_by_class):
        idxs = indices_by_class[label]
        chosen = rng.choice(len(idxs), size=target, replace=False)
        keep.update(idxs[i] for i in chosen)
    return [records[i] for i in sorted(keep)]


# ---------------------------------------------------------------------------
# Dataset directories

DATASET_JSON = "dataset.json"
FRAMES_NPZ = "frames.npz"

# suffix -> callable(path) -> callable(frame_index) -> image array
_DECODERS: dict[str, Callable[[Path], Callable[[int], np.ndarray]]] = {}


def register_decoder(
    suffix: str, opener: Callable[[Path], Callable[[int], np.ndarray]]
) -> None:
    """Register a frame source decoder for files with ``suffix``."""
    _DECODERS[suffix] = opener


def _open_npy_source(path: Path) -> Callable[[int], np.ndarray]:
    frames = np.load(path, mmap_mode="r")
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"{path}: expected (T, H, W, 3) frame array")

    def read(idx: int) -> np.ndarray:
        img = np.asarray(frames[idx])
        if img.dtype == np.uint8:
            return img.astype(np.float32) / 255.0
        return img.astype(np.float32)

    return read


register_decoder(".npy", _open_npy_source)


def open_frame_source(path: str | Path) -> Callable[[int], np.ndarray]:
    """Resolve a video source file to a per-frame reader via the registry."""
    path = Path(path)
    opener = _DECODERS.get(path.suffix)
    if opener is None:
        raise ValueError(
            f"no decoder registered for {path.suffix!r} "
            f"(available: {sorted(_DECODERS)})"
        )
    return opener(path)


def load_source_manifest(path: str | Path) -> list[dict]:
    """Read a source manifest: JSON list of video entries
    {video_id, path, fps, frame_count, annotation, task}."""
    obj = json.loads(Path(path).read_text())
    entries = obj["videos"] if isinstance(obj, dict) else obj
    required = {"video_id", "path", "fps", "frame_count", "annotation", "task"}
    for entry in entries:
        missing = required - set(entry)
        if missing:
            raise AnnotationError(
                f"{path}: video entry missing fields {sorted(missing)}"
            )
    return entries


@dataclass
class LoadedDataset:
    """A dataset directory pulled back into memory."""

    videos: list[VideoMeta]
    records: list[FrameRecord]
    class_ids: list[str]
    task: str
    meta: dict


def save_dataset(
    out_dir: str | Path,
    videos: Sequence[VideoMeta],
    records: Sequence[FrameRecord],
    task: str,
    class_ids: Sequence[str],
    extra_meta: dict | None = None,
) -> None:
    """Write a dataset directory: ``dataset.json`` plus a frames archive.

    All record images must be decoded and share one shape. Output bytes
    are a pure function of the inputs (no timestamps), so identical
    datasets serialize identically.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not records:
        raise ValueError("refusing to save a dataset with no records")
    images = np.stack([np.asarray(load_image(rec), dtype=np.float32) for rec in records])
    arrays = {
        "images": images,
        "video_id": np.array([rec.video_id for rec in records]),
        "frame_index": np.array([rec.frame_index for rec in records], dtype=np.int64),
        "timestamp_s": np.array([rec.timestamp_s for rec in records], dtype=np.float64),
        "label": np.array([rec.label for rec in records]),
    }
    np.savez(out_dir / FRAMES_NPZ, **arrays)
    meta = {
        "task": task,
        "class_ids": list(class_ids),
        "videos": [
            {
                "video_id": v.video_id,
                "fps": v.fps,
                "frame_count": v.frame_count,
                "source": v.source,
            }
            for v in videos
        ],
        "n_records": len(records),
        "frames_file": FRAMES_NPZ,
    }
    if extra_meta:
        meta.update(extra_meta)
    (out_dir / DATASET_JSON).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(dataset_dir: str | Path) -> LoadedDataset:
    dataset_dir = Path(dataset_dir)
    meta = json.loads((dataset_dir / DATASET_JSON).read_text())
    with np.load(dataset_dir / meta["frames_file"]) as npz:
        images = npz["images"]
        video_ids = npz["video_id"]
        frame_indices = npz["frame_index"]
        timestamps = npz["timestamp_s"]
        labels = npz["label"]
    records = [
        FrameRecord(
            video_id=str(video_ids[i]),
            frame_index=int(frame_indices[i]),
            timestamp_s=float(timestamps[i]),
            label=str(labels[i]),
            image=images[i],
        )
        for i in range(len(labels))
    ]
    videos = [
        VideoMeta(
            video_id=v["video_id"],
            fps=v["fps"],
            frame_count=v["frame_count"],
            source=v.get("source", ""),
        )
        for v in meta["videos"]
    ]
    return LoadedDataset(
        videos=videos,
        records=records,
        class_ids=list(meta["class_ids"]),
        task=meta["task"],
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Synthetic data


def synth_class_ids(n_classes: int) -> list[str]:
    """Label codes for a synthetic dataset: the real vocabularies' codes when
    the class count matches a task, generic ``C#`` codes otherwise."""
    for ids in TASK_CLASS_IDS.values():
        if len(ids) == n_classes:
            return list(ids)
    return [f"C{i}" for i in range(1, n_classes + 1)]


def class_pattern(k: int, image_size: int) -> np.ndarray:
    """Deterministic visual pattern for class index ``k`` (0-based).

    Channel 0 is a coarse oriented grating, channel 1 a quadrant pattern
    encoding the low four bits of ``k``, channel 2 a constant class level.
    The pattern depends on ``k`` alone, so datasets with different class
    counts share their leading patterns (a smaller task's visuals are a
    subset of a larger one's), and all three channels vary coarsely enough
    to survive aggressive spatial pooling.
    """
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    theta = np.pi * k / 8.0
    freq = 1.0 + (k % 2)
    phase = 2.0 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) / image_size
    grating = 0.5 + 0.5 * np.sin(phase)
    half = image_size // 2
    quadrants = np.zeros((image_size, image_size))
    for bit, (rows, cols) in enumerate(
        ((slice(0, half), slice(0, half)),
         (slice(0, half), slice(half, None)),
         (slice(half, None), slice(0, half)),
         (slice(half, None), slice(half, None)))
    ):
        if (k >> bit) & 1:
            quadrants[rows, cols] = 1.0
    level = np.full_like(xx, ((k % 16) + 1) / 17.0)
    return np.stack([grating, quadrants, level], axis=-1).astype(np.float32)


def synth_dataset(
    n_classes: int,
    n_per_class: int,
    image_size: int = 32,
    noise: float = 0.0,
    seed: int = 0,
    n_videos: int = 5,
) -> tuple[list[VideoMeta], list[FrameRecord]]:
    """Generate a labeled synthetic dataset of per-class visual patterns.

    Frames are spread over ``n_videos`` synthetic "procedures", each visiting
    every class in order, so video-level splits retain full class coverage.
    Identical seeds produce bit-identical datasets.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_per_class < 1:
        raise ValueError("need at least 1 record per class")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    ids = synth_class_ids(n_classes)
    n_videos = min(n_videos, n_per_class)
    rng = np.random.default_rng(seed)
    patterns = [class_pattern(k, image_size) for k in range(n_classes)]

    # per-video share of each class's frames, earlier videos take remainders
    shares = [n_per_class // n_videos] * n_videos
    for v in range(n_per_class % n_videos):
        shares[v] += 1

    videos: list[VideoMeta] = []
    records: list[FrameRecord] = []
    fps = 5.0
    for v in range(n_videos):
        video_id = f"synth{v:02d}"
        frame_count = shares[v] * n_classes
        meta = VideoMeta(video_id=video_id, fps=fps, frame_count=frame_count, source="synthetic")
        videos.append(meta)
        idx = 0
        for k in range(n_classes):
            for _ in range(shares[v]):
                img = patterns[k]
                if noise > 0:
                    img = img + noise * rng.standard_normal(img.shape).astype(np.float32)
                    img = np.clip(img, 0.0, 1.0)
                records.append(
                    FrameRecord(
                        video_id=video_id,
                        frame_index=idx,
                        timestamp_s=idx / fps,
                        label=ids[k],
                        image=img,
                    )
                )
                idx += 1
    return videos, records
