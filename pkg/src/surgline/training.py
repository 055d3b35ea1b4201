"""Staged contrastive fine-tuning, control runs, and the linear probe.

The protocol has two stages plus two controls, all sharing one training
loop:

* gesture stage: 50 epochs, lr 5e-5, batch 64, upsampled classes;
* phase stage: 15 epochs, lr 5e-5, batch 32, downsampled classes,
  initialized from the gesture-stage checkpoint;
* phase-only controls: the phase stage run from the base encoder instead,
  for 15 or 65 epochs.

Each batch pairs every frame with one text drawn uniformly from its
class's five descriptions and trains the multi-positive contrastive loss
under the configured freeze policy. Runs are deterministic given their
seed; balancing is drawn once per run, shuffling and text choice are
re-drawn per epoch from a (seed, epoch) stream.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from surgline.checkpoint import file_sha256, module_arrays, save_checkpoint
from surgline.encoders import FreezePolicy, apply_freeze_policy
from surgline.ingest import FrameRecord, balance_downsample, balance_upsample, load_image
from surgline.losses import class_positive_mask, multi_positive_infonce, similarity_logits
from surgline.vocab import ClassVocabulary
from surgline.zeroshot import build_prototypes, class_scores, encode_frames, rank_classes

logger = logging.getLogger(__name__)

STAGES = ("gesture_ft", "phase_ft", "control_phase_only", "control_phase_only_long")
BALANCING = ("upsample", "downsample", "none")
PRETRAINED_BASE = "pretrained_base"


@dataclass(frozen=True)
class StageConfig:
    """One fine-tuning run: schedule, balancing, freeze policy, provenance."""

    stage: str
    epochs: int
    learning_rate: float
    batch_size: int
    balancing: str
    unfreeze_last_k: int = 3
    train_projections: bool = False
    train_logit_scale: bool = False
    seed: int = 0
    init_from: str = PRETRAINED_BASE

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        if self.epochs <= 0:
            raise ValueError(f"epochs must be > 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(
                f"batch_size must be >= 2 (contrastive batches need negatives), "
                f"got {self.batch_size}"
            )
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.unfreeze_last_k < 0:
            raise ValueError(f"unfreeze_last_k must be >= 0, got {self.unfreeze_last_k}")
        if self.balancing not in BALANCING:
            raise ValueError(
                f"unknown balancing {self.balancing!r}; choose from {BALANCING}"
            )
        if self.stage == "phase_ft" and self.init_from == PRETRAINED_BASE:
            raise ValueError(
                "phase_ft must initialize from a gesture-stage checkpoint; "
                "pass init_from=<checkpoint>"
            )

    @property
    def freeze(self) -> FreezePolicy:
        return FreezePolicy(
            unfreeze_last_k=self.unfreeze_last_k,
            train_projections=self.train_projections,
            train_logit_scale=self.train_logit_scale,
        )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "StageConfig":
        return cls(**obj)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


_PRESETS = {
    "gesture_ft": dict(
        epochs=50, learning_rate=5e-5, batch_size=64, balancing="upsample"
    ),
    "phase_ft": dict(
        epochs=15, learning_rate=5e-5, batch_size=32, balancing="downsample"
    ),
    "control_phase_only": dict(
        epochs=15, learning_rate=5e-5, batch_size=32, balancing="downsample"
    ),
    "control_phase_only_long": dict(
        epochs=65, learning_rate=5e-5, batch_size=32, balancing="downsample"
    ),
}


def stage_defaults(stage: str) -> dict:
    """Schedule numbers for a stage, without constructing a config."""
    if stage not in _PRESETS:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    return dict(_PRESETS[stage])


def stage_preset(stage: str, **overrides) -> StageConfig:
    """Reference configuration for each run of the staged protocol."""
    kwargs = {"stage": stage, **stage_defaults(stage)}
    kwargs.update(overrides)
    return StageConfig(**kwargs)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_top1: float


@dataclass(frozen=True)
class CheckpointRecord:
    """A finished run: content-hash id, its config, weights path, history."""

    id: str
    config: StageConfig
    path: Path | None
    history: tuple[EpochStats, ...]


def write_history(path: str | Path, history: Sequence[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_top1"])
        for row in history:
            writer.writerow(
                [
                    row.epoch,
                    f"{row.train_loss:.8f}",
                    f"{row.val_loss:.8f}",
                    f"{row.val_top1:.8f}",
                ]
            )


def read_history(path: str | Path) -> list[EpochStats]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                EpochStats(
                    epoch=int(row["epoch"]),
                    train_loss=float(row["train_loss"]),
                    val_loss=float(row["val_loss"]),
                    val_top1=float(row["val_top1"]),
                )
            )
    return out


def _balanced(records: Sequence[FrameRecord], cfg: StageConfig) -> list[FrameRecord]:
    if cfg.balancing == "upsample":
        return balance_upsample(records, seed=cfg.seed)
    if cfg.balancing == "downsample":
        return balance_downsample(records, seed=cfg.seed)
    return list(records)


def _epoch_batches(
    n: int, batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a singleton batch carries no contrastive signal; fold it away
    return [b for b in batches if len(b) >= 2]


def _val_stats(
    encoder, val_records: Sequence[FrameRecord], vocab: ClassVocabulary, batch_size: int
) -> tuple[float, float]:
    """Validation loss (canonical text per frame) and zero-shot top-1."""
    if not val_records:
        return float("nan"), float("nan")
    canon = {cid: vocab.entry(cid).canonical for cid in vocab.class_ids}
    loss_sum = 0.0
    n_seen = 0
    with torch.no_grad():
        for start in range(0, len(val_records), batch_size):
            batch = val_records[start : start + batch_size]
            if len(batch) < 2 and len(val_records) > 1:
                continue
            images = np.stack([load_image(r) for r in batch])
            labels = [r.label for r in batch]
            img_emb = encoder.encode_images(images)
            txt_emb = encoder.encode_texts([canon[l] for l in labels])
            logits = similarity_logits(img_emb, txt_emb, encoder.scale)
            out = multi_positive_infonce(logits, class_positive_mask(labels, labels))
            loss_sum += float(out.value) * len(batch)
            n_seen += len(batch)
        bank = build_prototypes(encoder, vocab, "canonical_only")
        emb = encode_frames(encoder, list(val_records), batch_size)
        scores = class_scores(emb, bank)
    top1 = np.array([bank.class_ids[rank_classes(row)[0]] for row in scores])
    truth = np.array([r.label for r in val_records])
    return loss_sum / max(n_seen, 1), float((top1 == truth).mean())


def run_stage(
    encoder,
    train_records: Sequence[FrameRecord],
    val_records: Sequence[FrameRecord],
    vocab: ClassVocabulary,
    cfg: StageConfig,
    checkpoint_path: str | Path | None = None,
) -> CheckpointRecord:
    """Fine-tune ``encoder`` in place and return the run record.

    The caller is responsible for loading ``cfg.init_from`` weights first
    (the CLI does); this function only trains. Deterministic given
    ``cfg.seed`` on the surrogate encoder.
    """
    records = _balanced(train_records, cfg)
    if not records:
        raise ValueError("no training records")
    summary = apply_freeze_policy(encoder, cfg.freeze)
    params = [p for p in encoder.parameters() if p.requires_grad]
    if not params:
        raise ValueError("freeze policy leaves no trainable parameters")
    logger.info(
        "stage %s: %d records, %d/%d parameters trainable",
        cfg.stage, len(records), summary.n_trainable, summary.n_total,
    )
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    texts_by_class = {cid: vocab.entry(cid).all_texts for cid in vocab.class_ids}

    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng((cfg.seed, epoch))
        encoder.train()
        loss_sum = 0.0
        n_seen = 0
        for batch_idx, batch in enumerate(_epoch_batches(len(records), cfg.batch_size, rng)):
            recs = [records[i] for i in batch]
            labels = [r.label for r in recs]
            texts = []
            for label in labels:
                pool = texts_by_class[label]
                texts.append(pool[int(rng.integers(0, len(pool)))])
            images = np.stack([load_image(r) for r in recs])

            img_emb = encoder.encode_images(images)
            txt_emb = encoder.encode_texts(texts)
            logits = similarity_logits(img_emb, txt_emb, encoder.scale)
            out = multi_positive_infonce(logits, class_positive_mask(labels, labels))
            if not torch.isfinite(out.value):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {batch_idx}"
                )
            optimizer.zero_grad()
            out.value.backward()
            optimizer.step()
            loss_sum += out.value.item() * len(recs)
            n_seen += len(recs)
        encoder.eval()
        val_loss, val_top1 = _val_stats(encoder, val_records, vocab, cfg.batch_size)
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=loss_sum / max(n_seen, 1),
                val_loss=val_loss,
                val_top1=val_top1,
            )
        )

    record_id = cfg.config_hash
    path = None
    if checkpoint_path is not None:
        path = Path(checkpoint_path)
        meta = {
            "encoder_kind": getattr(encoder, "kind", type(encoder).__name__),
            "config": cfg.to_json(),
            "config_hash": cfg.config_hash,
            "history": [asdict(h) for h in history],
        }
        save_checkpoint(path, module_arrays(encoder), meta)
        record_id = file_sha256(path)
    return CheckpointRecord(
        id=record_id, config=cfg, path=path, history=tuple(history)
    )


# ---------------------------------------------------------------------------
# Linear probe


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 200
    learning_rate: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.learning_rate <= 0:
            raise ValueError("probe epochs and learning_rate must be positive")


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Single linear layer trained with cross-entropy on frozen embeddings.

    Scikit-learn estimator interface; full-batch Adam, deterministic per
    seed. ``classes`` may pin the class order (and include classes absent
    from the training data); otherwise classes are inferred sorted.
    """

    def __init__(
        self,
        epochs: int = 200,
        learning_rate: float = 5e-4,
        seed: int = 0,
        classes: Sequence[str] | None = None,
    ):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed
        self.classes = classes

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(
                f"X {X.shape} and y {y.shape} are not aligned 2D embeddings/labels"
            )
        cfg = ProbeConfig(self.epochs, self.learning_rate, self.seed)
        if self.classes is None:
            self.classes_ = np.unique(y)
        else:
            self.classes_ = np.asarray(list(self.classes), dtype=object)
            present = set(np.unique(y))
            missing = [c for c in self.classes_ if c not in present]
            if missing:
                logger.warning("probe training data lacks classes: %s", missing)
        index = {c: i for i, c in enumerate(self.classes_)}
        unknown = [label for label in np.unique(y) if label not in index]
        if unknown:
            raise ValueError(f"labels outside the class list: {unknown}")
        targets = torch.tensor([index[label] for label in y], dtype=torch.long)

        gen = torch.Generator().manual_seed(cfg.seed)
        weight = torch.empty(len(self.classes_), X.shape[1])
        weight.normal_(0.0, 0.01, generator=gen)
        weight.requires_grad_(True)
        bias = torch.zeros(len(self.classes_), requires_grad=True)

        inputs = torch.from_numpy(X)
        optimizer = torch.optim.Adam([weight, bias], lr=cfg.learning_rate)
        loss_fn = torch.nn.CrossEntropyLoss()
        for _ in range(cfg.epochs):
            optimizer.zero_grad()
            loss = loss_fn(inputs @ weight.T + bias, targets)
            loss.backward()
            optimizer.step()
        self.coef_ = weight.detach().numpy()
        self.intercept_ = bias.detach().numpy()
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = np.asarray(X, dtype=np.float32)
        return X @ self.coef_.T + self.intercept_

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


@dataclass(frozen=True)
class ProbeResult:
    probe: LinearProbe
    accuracy: dict[str, float]


def train_linear_probe(
    embeddings: np.ndarray,
    labels: Sequence[str],
    splits: dict[str, np.ndarray],
    cfg: ProbeConfig = ProbeConfig(),
    classes: Sequence[str] | None = None,
) -> ProbeResult:
    """Train on the ``train`` index set, report accuracy on every split.

    ``splits`` maps split name to index arrays into ``embeddings``; the
    sets must be pairwise disjoint and include ``train``.
    """
    if "train" not in splits:
        raise ValueError("splits must include a 'train' index set")
    names = sorted(splits)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            if np.intersect1d(splits[a], splits[b]).size:
                raise ValueError(f"splits {a!r} and {b!r} overlap")
    labels = np.asarray(labels)
    probe = LinearProbe(
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
        classes=classes,
    )
    train_idx = np.asarray(splits["train"], dtype=int)
    probe.fit(embeddings[train_idx], labels[train_idx])
    accuracy = {}
    for name in names:
        idx = np.asarray(splits[name], dtype=int)
        if idx.size == 0:
            accuracy[name] = float("nan")
            continue
        pred = probe.predict(embeddings[idx])
        accuracy[name] = float((pred == labels[idx]).mean())
    return ProbeResult(probe=probe, accuracy=accuracy)
