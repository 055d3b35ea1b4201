"""Evaluation metrics over ranked frame predictions.

Provides overall and per-class top-k accuracy, support-weighted (and
macro) precision/recall/F1 on top-1 decisions, and confusion matrices
with an optional row-normalized view. Weighted recall over the full label
set equals top-1 accuracy by construction; classes absent from the
evaluated frames report per-class values as None rather than 0.

Everything is tallied directly with numpy so the arithmetic is plain to
read and independent of any particular metrics library.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from surgline.zeroshot import Prediction

OVERALL_ROW = "OVERALL"


def _check_predictions(
    preds: Sequence[Prediction], class_ids: Sequence[str], k_max: int
) -> None:
    if not preds:
        raise ValueError("empty prediction list")
    known = set(class_ids)
    for p in preds:
        if p.true_label is None:
            raise ValueError(
                f"prediction for {p.video_id}[{p.frame_index}] has no true label"
            )
        if p.true_label not in known:
            raise ValueError(f"true label {p.true_label!r} outside the vocabulary")
        for label in p.labels:
            if label not in known:
                raise ValueError(
                    f"predicted label {label!r} outside the vocabulary in "
                    f"{p.video_id}[{p.frame_index}]"
                )
        if len(p.labels) < k_max:
            raise ValueError(
                f"prediction carries {len(p.labels)} ranked labels, need {k_max}"
            )


@dataclass(frozen=True)
class MetricsReport:
    """Aggregate metrics; per-class maps use None for absent classes."""

    class_ids: tuple[str, ...]
    n_frames: int
    overall_topk: dict[int, float]
    per_class_topk: dict[int, dict[str, float | None]]
    support: dict[str, int]
    per_class_precision: dict[str, float | None]
    per_class_recall: dict[str, float | None]
    per_class_f1: dict[str, float | None]
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    precision_macro: float
    recall_macro: float
    f1_macro: float

    @property
    def overall_top1(self) -> float:
        return self.overall_topk[1]

    @property
    def overall_top5(self) -> float:
        return self.overall_topk[5]

    def to_json(self) -> dict:
        return {
            "class_ids": list(self.class_ids),
            "n_frames": self.n_frames,
            "overall_topk": {str(k): v for k, v in self.overall_topk.items()},
            "per_class_topk": {
                str(k): dict(v) for k, v in self.per_class_topk.items()
            },
            "support": dict(self.support),
            "per_class_precision": dict(self.per_class_precision),
            "per_class_recall": dict(self.per_class_recall),
            "per_class_f1": dict(self.per_class_f1),
            "precision_weighted": self.precision_weighted,
            "recall_weighted": self.recall_weighted,
            "f1_weighted": self.f1_weighted,
            "precision_macro": self.precision_macro,
            "recall_macro": self.recall_macro,
            "f1_macro": self.f1_macro,
        }


def evaluate(
    preds: Sequence[Prediction],
    class_ids: Sequence[str],
    k_set: Sequence[int] = (1, 5),
) -> MetricsReport:
    """Tally ranked predictions into a metrics report.

    ``k_set`` lists the top-k accuracies to compute; every k must satisfy
    1 <= k <= len(class_ids) and every prediction must carry at least
    max(k) ranked labels.
    """
    class_ids = tuple(class_ids)
    k_set = sorted(set(int(k) for k in k_set))
    for k in k_set:
        if not 1 <= k <= len(class_ids):
            raise ValueError(f"k={k} out of range [1, {len(class_ids)}]")
    _check_predictions(preds, class_ids, max(k_set))

    index = {cid: i for i, cid in enumerate(class_ids)}
    n_classes = len(class_ids)
    n = len(preds)
    true_idx = np.array([index[p.true_label] for p in preds])
    top1_idx = np.array([index[p.labels[0]] for p in preds])

    support_arr = np.bincount(true_idx, minlength=n_classes)
    support = {cid: int(support_arr[i]) for i, cid in enumerate(class_ids)}

    overall_topk: dict[int, float] = {}
    per_class_topk: dict[int, dict[str, float | None]] = {}
    for k in k_set:
        hits = np.array(
            [p.true_label in p.labels[:k] for p in preds], dtype=np.float64
        )
        overall_topk[k] = float(hits.mean())
        per_class: dict[str, float | None] = {}
        for i, cid in enumerate(class_ids):
            sel = true_idx == i
            per_class[cid] = float(hits[sel].mean()) if sel.any() else None
        per_class_topk[k] = per_class

    # top-1 confusion tallies drive precision/recall/F1
    tp = np.zeros(n_classes)
    fp = np.zeros(n_classes)
    for t, p1 in zip(true_idx, top1_idx):
        if t == p1:
            tp[t] += 1
        else:
            fp[p1] += 1
    predicted = tp + fp

    per_prec: dict[str, float | None] = {}
    per_rec: dict[str, float | None] = {}
    per_f1: dict[str, float | None] = {}
    prec_arr = np.zeros(n_classes)
    rec_arr = np.zeros(n_classes)
    f1_arr = np.zeros(n_classes)
    for i, cid in enumerate(class_ids):
        prec = tp[i] / predicted[i] if predicted[i] else 0.0
        rec = tp[i] / support_arr[i] if support_arr[i] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if (prec + rec) else 0.0
        prec_arr[i], rec_arr[i], f1_arr[i] = prec, rec, f1
        if support_arr[i]:
            per_prec[cid], per_rec[cid], per_f1[cid] = prec, rec, f1
        else:
            # class never true: recall/F1 are undefined, and precision is
            # only computable when the class was actually predicted
            per_prec[cid] = prec if predicted[i] else None
            per_rec[cid] = per_f1[cid] = None

    weights = support_arr / n
    present = support_arr > 0
    return MetricsReport(
        class_ids=class_ids,
        n_frames=n,
        overall_topk=overall_topk,
        per_class_topk=per_class_topk,
        support=support,
        per_class_precision=per_prec,
        per_class_recall=per_rec,
        per_class_f1=per_f1,
        precision_weighted=float((weights * prec_arr).sum()),
        recall_weighted=float((weights * rec_arr).sum()),
        f1_weighted=float((weights * f1_arr).sum()),
        precision_macro=float(prec_arr[present].mean()),
        recall_macro=float(rec_arr[present].mean()),
        f1_macro=float(f1_arr[present].mean()),
    )


@dataclass(frozen=True)
class ConfusionMatrix:
    """Top-1 confusion counts, true class along rows."""

    class_ids: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        c = len(self.class_ids)
        if self.counts.shape != (c, c):
            raise ValueError(
                f"counts shape {self.counts.shape} does not match {c} classes"
            )

    @property
    def n_frames(self) -> int:
        return int(self.counts.sum())

    @property
    def zero_support_classes(self) -> tuple[str, ...]:
        sums = self.counts.sum(axis=1)
        return tuple(
            cid for cid, s in zip(self.class_ids, sums) if s == 0
        )

    @property
    def normalized(self) -> np.ndarray:
        """Rows divided by their support; zero-support rows stay all-zero."""
        sums = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        safe = np.where(sums == 0, 1.0, sums)
        return self.counts / safe


def confusion(preds: Sequence[Prediction], class_ids: Sequence[str]) -> ConfusionMatrix:
    """Count top-1 decisions into a (true, predicted) matrix."""
    class_ids = tuple(class_ids)
    _check_predictions(preds, class_ids, 1)
    index = {cid: i for i, cid in enumerate(class_ids)}
    counts = np.zeros((len(class_ids), len(class_ids)), dtype=np.int64)
    for p in preds:
        counts[index[p.true_label], index[p.labels[0]]] += 1
    return ConfusionMatrix(class_ids=class_ids, counts=counts)


# ---------------------------------------------------------------------------
# Serialization


def write_report_json(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


def write_report_csv(report: MetricsReport, path: str | Path) -> None:
    """Per-class rows plus a support-weighted OVERALL row."""
    ks = sorted(report.overall_topk)
    header = ["class_id", "support"] + [f"top{k}" for k in ks] + [
        "precision", "recall", "f1",
    ]

    def fmt(x: float | None) -> str:
        return "" if x is None else f"{x:.6f}"

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for cid in report.class_ids:
            writer.writerow(
                [cid, report.support[cid]]
                + [fmt(report.per_class_topk[k][cid]) for k in ks]
                + [
                    fmt(report.per_class_precision[cid]),
                    fmt(report.per_class_recall[cid]),
                    fmt(report.per_class_f1[cid]),
                ]
            )
        writer.writerow(
            [OVERALL_ROW, report.n_frames]
            + [fmt(report.overall_topk[k]) for k in ks]
            + [
                fmt(report.precision_weighted),
                fmt(report.recall_weighted),
                fmt(report.f1_weighted),
            ]
        )


def write_confusion_csv(
    matrix: ConfusionMatrix, path: str | Path, normalized: bool = False
) -> None:
    """Matrix as CSV with class-id row/column headers."""
    values = matrix.normalized if normalized else matrix.counts
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true_class"] + list(matrix.class_ids))
        for cid, row in zip(matrix.class_ids, values):
            cells = [f"{v:.6f}" if normalized else int(v) for v in row]
            writer.writerow([cid] + cells)
