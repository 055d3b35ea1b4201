"""Zero-shot frame classification against text prototypes.

Every class is represented in the shared embedding space by its
vocabulary texts, in one of three ways:

* ``mean_of_texts``: average the canonical and paraphrase embeddings,
  then renormalize (the default);
* ``canonical_only``: embed only the canonical description;
* ``max_sim``: keep all text embeddings and score a frame by its maximum
  similarity to any text of the class.

A frame's class scores are cosine similarities; confidences are the
softmax of those scores multiplied by the encoder's similarity scale.
Ties in ranking break toward the earlier class in vocabulary order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from surgline.ingest import FrameRecord, load_image
from surgline.losses import DEFAULT_LOGIT_SCALE
from surgline.vocab import ClassVocabulary, prompts_for_class

PROTOTYPE_MODES = ("mean_of_texts", "canonical_only", "max_sim")

TOPK_COLUMNS = 5


@dataclass(frozen=True)
class PrototypeBank:
    """Per-class text embeddings ready for similarity scoring.

    For the pooled modes ``vectors`` has one row per class; for
    ``max_sim`` it has one row per text and ``owners[t]`` gives the class
    index of text row ``t``.
    """

    class_ids: tuple[str, ...]
    mode: str
    vectors: np.ndarray
    owners: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)


def build_prototypes(
    encoder, vocab: ClassVocabulary, mode: str = "mean_of_texts"
) -> PrototypeBank:
    """Embed the vocabulary texts into a prototype bank."""
    if mode not in PROTOTYPE_MODES:
        raise ValueError(f"unknown prototype mode {mode!r}; choose from {PROTOTYPE_MODES}")
    class_ids = vocab.class_ids
    texts: list[str] = []
    owners: list[int] = []
    for ci, class_id in enumerate(class_ids):
        prompt_kind = "canonical_only" if mode == "canonical_only" else "all_texts"
        for text in prompts_for_class(vocab, class_id, prompt_kind):
            texts.append(text)
            owners.append(ci)
    with torch.no_grad():
        emb = encoder.encode_texts(texts).cpu().numpy().astype(np.float64)
    owners_arr = np.asarray(owners)
    if mode == "max_sim":
        vectors = emb
    else:
        vectors = np.stack(
            [emb[owners_arr == ci].mean(axis=0) for ci in range(len(class_ids))]
        )
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        owners_arr = np.arange(len(class_ids))
    return PrototypeBank(
        class_ids=tuple(class_ids), mode=mode, vectors=vectors, owners=owners_arr
    )


def class_scores(embeddings: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Cosine score of every frame against every class, shape (N, C)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != bank.vectors.shape[1]:
        raise ValueError(
            f"embeddings shape {emb.shape} incompatible with prototype "
            f"width {bank.vectors.shape[1]}"
        )
    sims = emb @ bank.vectors.T
    if bank.mode != "max_sim":
        return sims
    out = np.full((emb.shape[0], bank.n_classes), -np.inf)
    for ci in range(bank.n_classes):
        out[:, ci] = sims[:, bank.owners == ci].max(axis=1)
    return out


def softmax_confidences(
    scores: np.ndarray, scale: float = DEFAULT_LOGIT_SCALE
) -> np.ndarray:
    """Rows of softmax(scale * scores); each row sums to 1."""
    z = scale * np.asarray(scores, dtype=np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def rank_classes(scores_row: np.ndarray) -> np.ndarray:
    """Class indices from best to worst; ties keep vocabulary order."""
    return np.argsort(-scores_row, kind="stable")


@dataclass(frozen=True)
class Prediction:
    """Ranked top-k output for one frame."""

    video_id: str
    frame_index: int
    timestamp_s: float
    true_label: str | None
    labels: tuple[str, ...]
    scores: tuple[float, ...]

    @property
    def top1(self) -> str:
        return self.labels[0]


def encode_frames(encoder, records: Sequence[FrameRecord], batch_size: int = 64) -> np.ndarray:
    """Embed the images of a record sequence, batched, without gradients."""
    chunks = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            batch = records[start : start + batch_size]
            images = np.stack([load_image(rec) for rec in batch])
            chunks.append(encoder.encode_images(images).cpu().numpy())
    if not chunks:
        return np.zeros((0, getattr(encoder, "embed_dim", 0)))
    return np.concatenate(chunks).astype(np.float64)


def predict_topk(
    embeddings: np.ndarray,
    bank: PrototypeBank,
    records: Sequence[FrameRecord] | None = None,
    k: int = TOPK_COLUMNS,
    scale: float = DEFAULT_LOGIT_SCALE,
) -> list[Prediction]:
    """Rank classes for each embedded frame.

    When ``records`` is given it supplies frame provenance and true
    labels; otherwise frames are numbered sequentially with no truth.
    ``k`` must lie in [1, n_classes].
    """
    if not 1 <= k <= bank.n_classes:
        raise ValueError(f"k={k} out of range [1, {bank.n_classes}]")
    scores = class_scores(embeddings, bank)
    conf = softmax_confidences(scores, scale)
    out = []
    for i in range(scores.shape[0]):
        order = rank_classes(scores[i])[:k]
        labels = tuple(bank.class_ids[j] for j in order)
        top_scores = tuple(float(conf[i, j]) for j in order)
        if records is not None:
            rec = records[i]
            pred = Prediction(
                video_id=rec.video_id,
                frame_index=rec.frame_index,
                timestamp_s=rec.timestamp_s,
                true_label=rec.label,
                labels=labels,
                scores=top_scores,
            )
        else:
            pred = Prediction(
                video_id="",
                frame_index=i,
                timestamp_s=float(i),
                true_label=None,
                labels=labels,
                scores=top_scores,
            )
        out.append(pred)
    return out


# ---------------------------------------------------------------------------
# Prediction dump files


def _prediction_header() -> list[str]:
    cols = ["video_id", "frame_index", "timestamp_s", "true_label"]
    cols += [f"top{i}" for i in range(1, TOPK_COLUMNS + 1)]
    cols += [f"score_top{i}" for i in range(1, TOPK_COLUMNS + 1)]
    return cols


def write_predictions(path: str | Path, predictions: Sequence[Prediction]) -> None:
    """Dump predictions as CSV with fixed top-5 columns.

    Numeric fields use fixed-precision formatting so identical runs
    produce identical bytes. Missing ranks (fewer than five classes) and
    missing truth are written as empty fields.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_prediction_header())
        for p in predictions:
            labels = list(p.labels[:TOPK_COLUMNS])
            scores = [f"{s:.8f}" for s in p.scores[:TOPK_COLUMNS]]
            labels += [""] * (TOPK_COLUMNS - len(labels))
            scores += [""] * (TOPK_COLUMNS - len(scores))
            writer.writerow(
                [
                    p.video_id,
                    p.frame_index,
                    f"{p.timestamp_s:.6f}",
                    p.true_label or "",
                ]
                + labels
                + scores
            )


def read_predictions(path: str | Path) -> list[Prediction]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != _prediction_header():
            raise ValueError(f"{path}: unexpected prediction dump columns")
        out = []
        for row in reader:
            labels = tuple(
                row[f"top{i}"] for i in range(1, TOPK_COLUMNS + 1) if row[f"top{i}"]
            )
            scores = tuple(
                float(row[f"score_top{i}"])
                for i in range(1, TOPK_COLUMNS + 1)
                if row[f"score_top{i}"]
            )
            out.append(
                Prediction(
                    video_id=row["video_id"],
                    frame_index=int(row["frame_index"]),
                    timestamp_s=float(row["timestamp_s"]),
                    true_label=row["true_label"] or None,
                    labels=labels,
                    scores=scores,
                )
            )
    return out


# ---------------------------------------------------------------------------
# Estimator wrapper


class ZeroShotFrameClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn shaped zero-shot classifier over a dual encoder.

    ``fit`` embeds the vocabulary into prototypes (no image training
    happens here); ``predict`` and ``predict_proba`` accept either raw
    image batches or precomputed embeddings with shape (n_frames,
    embed_dim).
    """

    def __init__(
        self,
        encoder=None,
        vocab: ClassVocabulary | None = None,
        prototype_mode: str = "mean_of_texts",
        scale: float | None = None,
        batch_size: int = 64,
    ):
        self.encoder = encoder
        self.vocab = vocab
        self.prototype_mode = prototype_mode
        self.scale = scale
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        if self.encoder is None or self.vocab is None:
            raise ValueError("ZeroShotFrameClassifier needs both encoder and vocab")
        self.prototypes_ = build_prototypes(self.encoder, self.vocab, self.prototype_mode)
        self.classes_ = np.asarray(self.prototypes_.class_ids, dtype=object)
        self.scale_ = (
            float(self.encoder.scale.item()) if self.scale is None else float(self.scale)
        )
        return self

    def _embed(self, X) -> np.ndarray:
        X = np.asarray(X) if not torch.is_tensor(X) else X
        if getattr(X, "ndim", 0) == 2:
            return np.asarray(X, dtype=np.float64)
        images = X
        chunks = []
        with torch.no_grad():
            for start in range(0, len(images), self.batch_size):
                chunk = self.encoder.encode_images(images[start : start + self.batch_size])
                chunks.append(chunk.cpu().numpy())
        return np.concatenate(chunks).astype(np.float64)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "prototypes_")
        return class_scores(self._embed(X), self.prototypes_)

    def predict_proba(self, X) -> np.ndarray:
        return softmax_confidences(self.decision_function(X), self.scale_)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        idx = np.array([rank_classes(row)[0] for row in scores])
        return self.classes_[idx]
