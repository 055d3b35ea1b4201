"""Command-line front end for reproducible dataset, training, and report runs.

Subcommands: synth, prepare, split, balance, train-gestures, train-phases,
train-control, probe, eval, timeline. Every artifact-producing command
takes an output directory, writes its files there, and finishes with a
``manifest.json`` capturing the command, the fully resolved configuration,
the seed, input paths, and a SHA-256 per artifact. Configuration is
layered (config file < SURGLINE_* environment variables < flags), and any
omitted seed is generated once and recorded, so a manifest is enough to
replay a run; surrogate-mode replays are byte-identical.

The SURGLINE_CACHE environment variable, when set, points at a directory
used to cache frame embeddings keyed by encoder state and dataset
contents.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import secrets
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from surgline.checkpoint import (
    file_sha256,
    load_checkpoint,
    load_into_module,
    module_arrays,
    save_checkpoint,
)
from surgline.encoders import ClipBackboneEncoder, SurrogateEncoder
from surgline.ingest import (
    AnnotationError,
    FrameRecord,
    LoadedDataset,
    SplitError,
    VideoMeta,
    balance_downsample,
    balance_upsample,
    labels_from_intervals,
    load_dataset,
    load_source_manifest,
    load_split,
    make_split,
    open_frame_source,
    parse_gesture_transcript,
    parse_phase_annotation,
    sample_frames,
    save_dataset,
    save_split,
    split_records,
    synth_class_ids,
    synth_dataset,
)
from surgline.metrics import (
    confusion,
    evaluate,
    write_confusion_csv,
    write_report_csv,
    write_report_json,
)
from surgline.timeline import (
    build_timeline,
    export_phase_diagram,
    timeline_from_truth,
    write_narrative,
    write_phase_diagram_csv,
    write_timeline_json,
)
from surgline.training import (
    PRETRAINED_BASE,
    ProbeConfig,
    StageConfig,
    run_stage,
    stage_defaults,
    train_linear_probe,
    write_history,
)
from surgline.vocab import (
    ClassVocabulary,
    VocabularyError,
    bundled_vocabulary,
    load_vocabulary,
)
from surgline.zeroshot import (
    build_prototypes,
    encode_frames,
    predict_topk,
    read_predictions,
    write_predictions,
)

ENV_PREFIX = "SURGLINE_"
CACHE_ENV = "SURGLINE_CACHE"
MANIFEST_NAME = "manifest.json"


class CliError(Exception):
    """User-facing command failure."""


# ---------------------------------------------------------------------------
# Config layering and manifests


def _coerce(raw: str, like) -> object:
    """Parse an environment override to the type of the default value."""
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise CliError(f"cannot parse boolean from {raw!r}")
    if isinstance(like, int) and not isinstance(like, bool):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if like is None:
        # untyped default (e.g. an optional seed): best-effort numeric
        try:
            return int(raw)
        except ValueError:
            return raw
    return raw


def layered_config(defaults: dict, config_path: str | None, flags: dict) -> dict:
    """Resolve a config: defaults, then file, then environment, then flags."""
    cfg = dict(defaults)
    if config_path:
        file_cfg = json.loads(Path(config_path).read_text())
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise CliError(f"unknown config keys in {config_path}: {unknown}")
        cfg.update(file_cfg)
    for key, default in defaults.items():
        raw = os.environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            cfg[key] = _coerce(raw, default)
    for key, value in flags.items():
        if key in cfg and value is not None:
            cfg[key] = value
    return cfg


def ensure_seed(cfg: dict) -> dict:
    if cfg.get("seed") is None:
        cfg["seed"] = secrets.randbelow(2**31)
    else:
        cfg["seed"] = int(cfg["seed"])
    return cfg


def write_manifest(
    out_dir: Path,
    command: str,
    cfg: dict,
    inputs: dict[str, str],
    outputs: Sequence[str],
    config_path: str | None = None,
) -> None:
    """Record the run next to its artifacts, hashing each output file."""
    hashes = {name: file_sha256(out_dir / name) for name in sorted(outputs)}
    manifest = {
        "command": command,
        "config_path": config_path,
        "config": cfg,
        "seed": cfg.get("seed"),
        "inputs": inputs,
        "outputs": sorted(outputs),
        "artifact_hashes": hashes,
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Shared resolution helpers


def _natural_key(class_id: str) -> tuple:
    m = re.fullmatch(r"([A-Za-z]+)(\d+)", class_id)
    return (m.group(1), int(m.group(2))) if m else (class_id, -1)


def resolve_vocab(
    vocab_path: str | None,
    task: str | None,
    class_ids: Sequence[str] | None = None,
) -> ClassVocabulary:
    """Pick the vocabulary: explicit file, named task, or bundled match."""
    if vocab_path:
        vocab = load_vocabulary(vocab_path)
    elif task:
        vocab = bundled_vocabulary(task)
    elif class_ids is not None:
        wanted = set(class_ids)
        for name in ("gesture", "phase"):
            candidate = bundled_vocabulary(name)
            if set(candidate.class_ids) == wanted:
                vocab = candidate
                break
        else:
            raise CliError(
                "class ids match no bundled vocabulary; pass --vocab or --task"
            )
    else:
        raise CliError("pass --vocab or --task to select a vocabulary")
    if class_ids is not None and set(class_ids) != set(vocab.class_ids):
        raise CliError(
            f"dataset classes {sorted(class_ids)} do not match vocabulary "
            f"classes {sorted(vocab.class_ids)}"
        )
    return vocab


def build_encoder(cfg: dict):
    kind = cfg.get("encoder", "surrogate")
    if kind == "surrogate":
        return SurrogateEncoder(seed=cfg["seed"])
    if kind == "clip":
        return ClipBackboneEncoder(
            pretrained=cfg.get("pretrained"), cache_dir=os.environ.get(CACHE_ENV)
        )
    raise CliError(f"unknown encoder {kind!r}; choose surrogate or clip")


def _load_init_weights(encoder, init_path: str) -> None:
    ckpt = load_checkpoint(init_path)
    kind = ckpt.meta.get("encoder_kind")
    if kind is not None and kind != getattr(encoder, "kind", None):
        raise CliError(
            f"checkpoint {init_path} holds {kind!r} weights but the run uses "
            f"a {getattr(encoder, 'kind', '?')!r} encoder"
        )
    load_into_module(encoder, ckpt.arrays)


def _encoder_fingerprint(encoder) -> str:
    digest = hashlib.sha256()
    arrays = module_arrays(encoder)
    for name in sorted(arrays):
        digest.update(name.encode("utf-8"))
        digest.update(arrays[name].tobytes())
    return digest.hexdigest()


def cached_embeddings(encoder, dataset_dir: Path, records, batch_size: int = 64) -> np.ndarray:
    """Embed records, consulting the SURGLINE_CACHE directory when set.

    The cache key covers the encoder state, the dataset archive, and the
    exact record subset, so stale or mismatched entries cannot be served.
    """
    cache_root = os.environ.get(CACHE_ENV)
    if not cache_root:
        return encode_frames(encoder, records, batch_size)
    frames_file = dataset_dir / "frames.npz"
    record_ids = "\n".join(f"{r.video_id}:{r.frame_index}" for r in records)
    key_src = (
        _encoder_fingerprint(encoder)
        + file_sha256(frames_file)
        + hashlib.sha256(record_ids.encode("utf-8")).hexdigest()
    )
    key = hashlib.sha256(key_src.encode("utf-8")).hexdigest()[:24]
    cache_path = Path(cache_root) / f"embeddings_{key}.npy"
    if cache_path.exists():
        return np.load(cache_path)
    emb = encode_frames(encoder, records, batch_size)
    cache_path.parent.mkdir(parents=True, exist_ok=True)
    np.save(cache_path, emb)
    return emb


def _split_for(args, ds: LoadedDataset, seed: int, out_dir: Path, outputs: list[str]):
    """Load the given split file or derive and save a default 60/10/30 one."""
    if args.split:
        split = load_split(args.split)
        missing = {v.video_id for v in ds.videos} - split.all_videos
        if missing:
            raise CliError(f"split does not cover videos: {sorted(missing)}")
        return split
    split = make_split([v.video_id for v in ds.videos], (0.6, 0.1, 0.3), seed=seed)
    save_split(split, out_dir / "split.json")
    outputs.append("split.json")
    return split


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    defaults = {
        "classes": 7,
        "per_class": 40,
        "image_size": 32,
        "noise": 0.05,
        "videos": 5,
        "seed": None,
    }
    cfg = ensure_seed(layered_config(defaults, args.config, vars(args)))
    out = _out_dir(args)
    videos, records = synth_dataset(
        n_classes=cfg["classes"],
        n_per_class=cfg["per_class"],
        image_size=cfg["image_size"],
        noise=cfg["noise"],
        seed=cfg["seed"],
        n_videos=cfg["videos"],
    )
    save_dataset(
        out,
        videos,
        records,
        task="synthetic",
        class_ids=synth_class_ids(cfg["classes"]),
        extra_meta={"synth": cfg},
    )
    write_manifest(out, "synth", cfg, {}, ["dataset.json", "frames.npz"], args.config)
    print(f"synth dataset: {len(records)} records, {len(videos)} videos -> {out}")
    return 0


def cmd_prepare(args) -> int:
    defaults = {"stride": 5, "seed": None}
    cfg = ensure_seed(layered_config(defaults, args.config, vars(args)))
    out = _out_dir(args)
    entries = load_source_manifest(args.manifest)
    tasks = {e["task"] for e in entries}
    if len(tasks) != 1:
        raise CliError(f"source manifest mixes tasks: {sorted(tasks)}")
    task = tasks.pop()
    if task not in ("gesture", "phase"):
        raise CliError(f"unknown task {task!r} in source manifest")
    vocab = bundled_vocabulary(task) if not args.vocab else load_vocabulary(args.vocab)

    base = Path(args.manifest).parent
    all_videos: list[VideoMeta] = []
    all_records: list[FrameRecord] = []
    for entry in entries:
        video = VideoMeta(
            video_id=entry["video_id"],
            fps=float(entry["fps"]),
            frame_count=int(entry["frame_count"]),
            source=str(entry["path"]),
        )
        ann_path = base / entry["annotation"]
        if task == "gesture":
            intervals = parse_gesture_transcript(ann_path, video, vocab.class_ids)
            labels = labels_from_intervals(intervals, video.frame_count)
        else:
            labels = parse_phase_annotation(ann_path, video)
        source = open_frame_source(base / entry["path"])
        sampled = sample_frames(video, labels, cfg["stride"], image_source=source)
        all_videos.append(video)
        all_records.extend(sampled.records)
    if not all_records:
        raise CliError("no labeled frames survived sampling")
    save_dataset(
        out,
        all_videos,
        all_records,
        task=task,
        class_ids=list(vocab.class_ids),
        extra_meta={
            "stride": cfg["stride"],
            "effective_fps": {v.video_id: v.fps / cfg["stride"] for v in all_videos},
        },
    )
    write_manifest(
        out, "prepare", cfg, {"manifest": args.manifest},
        ["dataset.json", "frames.npz"], args.config,
    )
    print(f"prepared {len(all_records)} frames from {len(all_videos)} videos -> {out}")
    return 0


def cmd_split(args) -> int:
    defaults = {"seed": None}
    cfg = ensure_seed(layered_config(defaults, args.config, vars(args)))
    out = _out_dir(args)
    if args.dataset:
        ds = load_dataset(args.dataset)
        videos = [v.video_id for v in ds.videos]
    elif args.videos:
        videos = [v for v in args.videos.split(",") if v]
    else:
        raise CliError("pass --dataset or --videos")
    if args.counts:
        spec = tuple(int(x) for x in args.counts.split(","))
    else:
        spec = tuple(float(x) for x in (args.ratios or "0.6,0.1,0.3").split(","))
    if len(spec) != 3:
        raise CliError("split spec needs exactly three values")
    split = make_split(videos, spec, seed=cfg["seed"])
    save_split(split, out / "split.json")
    cfg["spec"] = list(spec)
    write_manifest(
        out, "split", cfg,
        {"dataset": args.dataset or "", "videos": args.videos or ""},
        ["split.json"], args.config,
    )
    print(
        f"split {len(videos)} videos into "
        f"{len(split.train)}/{len(split.val)}/{len(split.test)} -> {out / 'split.json'}"
    )
    return 0


def cmd_balance(args) -> int:
    defaults = {"mode": "upsample", "seed": None}
    cfg = ensure_seed(layered_config(defaults, args.config, vars(args)))
    if cfg["mode"] not in ("upsample", "downsample"):
        raise CliError(f"unknown balance mode {cfg['mode']!r}")
    out = _out_dir(args)
    ds = load_dataset(args.dataset)
    split = load_split(args.split)
    parts = split_records(ds.records, split)
    balancer = balance_upsample if cfg["mode"] == "upsample" else balance_downsample
    balanced_train = balancer(parts["train"], seed=cfg["seed"])
    records = balanced_train + parts["val"] + parts["test"]
    save_dataset(
        out,
        ds.videos,
        records,
        task=ds.task,
        class_ids=ds.class_ids,
        extra_meta={"balanced": {"mode": cfg["mode"], "seed": cfg["seed"]}},
    )
    write_manifest(
        out, "balance", cfg,
        {"dataset": args.dataset, "split": args.split},
        ["dataset.json", "frames.npz"], args.config,
    )
    print(
        f"balanced train split {len(parts['train'])} -> {len(balanced_train)} "
        f"records ({cfg['mode']}) -> {out}"
    )
    return 0


def _run_training(args, stage: str) -> int:
    defaults = {
        **stage_defaults(stage),
        "unfreeze_last_k": 3,
        "train_projections": False,
        "train_logit_scale": False,
        "encoder": "surrogate",
        "pretrained": None,
        "seed": None,
    }
    cfg = ensure_seed(layered_config(defaults, args.config, vars(args)))
    out = _out_dir(args)
    ds = load_dataset(args.dataset)
    vocab = resolve_vocab(args.vocab, getattr(args, "task", None), ds.class_ids)
    outputs = ["checkpoint.ckpt", "history.csv"]
    split = _split_for(args, ds, cfg["seed"], out, outputs)
    parts = split_records(ds.records, split)
    if not parts["train"]:
        raise CliError("train split is empty")

    init_from = getattr(args, "init", None) or PRETRAINED_BASE
    stage_cfg = StageConfig(
        stage=stage,
        epochs=cfg["epochs"],
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        balancing=cfg["balancing"],
        unfreeze_last_k=cfg["unfreeze_last_k"],
        train_projections=cfg["train_projections"],
        train_logit_scale=cfg["train_logit_scale"],
        seed=cfg["seed"],
        init_from=init_from,
    )
    encoder = build_encoder(cfg)
    if init_from != PRETRAINED_BASE:
        _load_init_weights(encoder, init_from)
    record = run_stage(
        encoder, parts["train"], parts["val"], vocab, stage_cfg,
        checkpoint_path=out / "checkpoint.ckpt",
    )
    write_history(out / "history.csv", record.history)
    cfg["init_from"] = init_from
    cfg["stage"] = stage
    inputs = {"dataset": args.dataset, "split": args.split or ""}
    if init_from != PRETRAINED_BASE:
        inputs["init"] = init_from
    write_manifest(out, args.command, cfg, inputs, outputs, args.config)
    last = record.history[-1]
    print(
        f"{stage}: {len(record.history)} epochs, final train_loss "
        f"{last.train_loss:.4f}, val_top1 {last.val_top1:.4f} -> {out}"
    )
    return 0


def cmd_train_gestures(args) -> int:
    return _run_training(args, "gesture_ft")


def cmd_train_phases(args) -> int:
    return _run_training(args, "phase_ft")


def cmd_train_control(args) -> int:
    stage = "control_phase_only_long" if args.long else "control_phase_only"
    return _run_training(args, stage)


def cmd_probe(args) -> int:
    defaults = {
        "epochs": 200,
        "learning_rate": 5e-4,
        "encoder": "surrogate",
        "pretrained": None,
        "batch_size": 64,
        "seed": None,
    }
    cfg = ensure_seed(layered_config(defaults, args.config, vars(args)))
    out = _out_dir(args)
    ds = load_dataset(args.dataset)
    vocab = resolve_vocab(args.vocab, getattr(args, "task", None), ds.class_ids)
    outputs = ["probe_report.json", "probe.ckpt"]
    split = _split_for(args, ds, cfg["seed"], out, outputs)
    encoder = build_encoder(cfg)
    if args.checkpoint:
        _load_init_weights(encoder, args.checkpoint)
    encoder.eval()
    embeddings = cached_embeddings(encoder, Path(args.dataset), ds.records, cfg["batch_size"])
    part_of = {rec_idx: split.part_of(rec.video_id) for rec_idx, rec in enumerate(ds.records)}
    splits = {
        name: np.array([i for i, p in part_of.items() if p == name], dtype=int)
        for name in ("train", "val", "test")
    }
    labels = [rec.label for rec in ds.records]
    result = train_linear_probe(
        embeddings,
        labels,
        splits,
        ProbeConfig(cfg["epochs"], cfg["learning_rate"], cfg["seed"]),
        classes=vocab.class_ids,
    )
    report = {
        "accuracy": {k: result.accuracy[k] for k in sorted(result.accuracy)},
        "epochs": cfg["epochs"],
        "learning_rate": cfg["learning_rate"],
        "seed": cfg["seed"],
        "classes": list(vocab.class_ids),
    }
    (out / "probe_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    save_checkpoint(
        out / "probe.ckpt",
        {"coef": result.probe.coef_, "intercept": result.probe.intercept_},
        {"classes": list(vocab.class_ids), "config": report},
    )
    inputs = {"dataset": args.dataset, "split": args.split or ""}
    if args.checkpoint:
        inputs["checkpoint"] = args.checkpoint
    write_manifest(out, "probe", cfg, inputs, outputs, args.config)
    acc = ", ".join(f"{k} {v:.4f}" for k, v in sorted(result.accuracy.items()))
    print(f"probe accuracy: {acc} -> {out}")
    return 0


def _predictions_from_dataset(args, cfg: dict, out: Path, outputs: list[str]):
    ds = load_dataset(args.dataset)
    vocab = resolve_vocab(args.vocab, getattr(args, "task", None), ds.class_ids)
    if args.split:
        split = load_split(args.split)
        records = split_records(ds.records, split)[args.part]
        if not records:
            raise CliError(f"{args.part} split holds no records")
    else:
        records = ds.records
    encoder = build_encoder(cfg)
    if args.checkpoint:
        _load_init_weights(encoder, args.checkpoint)
    encoder.eval()
    bank = build_prototypes(encoder, vocab, cfg["prototypes"])
    embeddings = cached_embeddings(encoder, Path(args.dataset), records, cfg["batch_size"])
    preds = predict_topk(
        embeddings,
        bank,
        records=records,
        k=min(5, len(vocab.class_ids)),
        scale=float(encoder.scale.item()),
    )
    write_predictions(out / "predictions.csv", preds)
    outputs.append("predictions.csv")
    return preds, vocab


def cmd_eval(args) -> int:
    defaults = {
        "encoder": "surrogate",
        "pretrained": None,
        "prototypes": "mean_of_texts",
        "batch_size": 64,
        "seed": None,
    }
    cfg = ensure_seed(layered_config(defaults, args.config, vars(args)))
    out = _out_dir(args)
    outputs: list[str] = []
    inputs: dict[str, str] = {}
    if args.preds:
        preds = read_predictions(args.preds)
        inputs["preds"] = args.preds
        if args.vocab or args.task:
            vocab = resolve_vocab(args.vocab, args.task)
            class_ids = list(vocab.class_ids)
        else:
            seen = {p.true_label for p in preds if p.true_label}
            seen.update(label for p in preds for label in p.labels)
            class_ids = sorted(seen, key=_natural_key)
    elif args.dataset:
        preds, vocab = _predictions_from_dataset(args, cfg, out, outputs)
        class_ids = list(vocab.class_ids)
        inputs["dataset"] = args.dataset
        if args.split:
            inputs["split"] = args.split
        if args.checkpoint:
            inputs["checkpoint"] = args.checkpoint
    else:
        raise CliError("pass --preds or --dataset")

    k_set = [int(k) for k in (args.k or "1,5").split(",") if k]
    k_set = [k for k in k_set if k <= len(class_ids)]
    if not k_set:
        raise CliError("no valid k values for this class count")
    report = evaluate(preds, class_ids, k_set)
    matrix = confusion(preds, class_ids)
    write_report_json(report, out / "report.json")
    write_report_csv(report, out / "report.csv")
    write_confusion_csv(matrix, out / "confusion.csv", normalized=False)
    write_confusion_csv(matrix, out / "confusion_normalized.csv", normalized=True)
    outputs += ["report.json", "report.csv", "confusion.csv", "confusion_normalized.csv"]
    cfg["k"] = k_set
    write_manifest(out, "eval", cfg, inputs, outputs, args.config)
    for k in k_set:
        print(f"top-{k} accuracy: {report.overall_topk[k]:.4f}")
    print(
        f"weighted precision {report.precision_weighted:.4f}, "
        f"recall {report.recall_weighted:.4f}, f1 {report.f1_weighted:.4f} -> {out}"
    )
    return 0


def cmd_timeline(args) -> int:
    defaults = {"window": 11, "seed": None}
    cfg = ensure_seed(layered_config(defaults, args.config, vars(args)))
    if cfg["window"] < 1 or cfg["window"] % 2 == 0:
        raise CliError(f"--window must be odd and >= 1, got {cfg['window']}")
    out = _out_dir(args)
    preds = read_predictions(args.preds)
    if not preds:
        raise CliError("prediction dump is empty")
    label_pool = {p.true_label for p in preds if p.true_label}
    label_pool.update(label for p in preds for label in p.labels)
    vocab = resolve_vocab(args.vocab, args.task, sorted(label_pool, key=_natural_key))

    by_video: dict[str, list] = {}
    for p in preds:
        by_video.setdefault(p.video_id, []).append(p)
    outputs: list[str] = []
    for video_id in sorted(by_video):
        vid_preds = sorted(by_video[video_id], key=lambda p: p.timestamp_s)
        frames = [
            FrameRecord(
                video_id=p.video_id,
                frame_index=p.frame_index,
                timestamp_s=p.timestamp_s,
                label=p.true_label or p.labels[0],
            )
            for p in vid_preds
        ]
        timeline = build_timeline(frames, vid_preds, vocab, window=cfg["window"])
        write_timeline_json(timeline, out / f"{video_id}.timeline.json")
        write_narrative(timeline, out / f"{video_id}.narrative.txt")
        outputs += [f"{video_id}.timeline.json", f"{video_id}.narrative.txt"]
        if all(p.true_label for p in vid_preds):
            truth = timeline_from_truth(frames, vocab)
            diagram = export_phase_diagram(
                timeline, truth, times=[f.timestamp_s for f in frames]
            )
            write_phase_diagram_csv(diagram, out / f"{video_id}.diagram.csv")
            outputs.append(f"{video_id}.diagram.csv")
            print(
                f"{video_id}: {len(timeline.segments)} segments, "
                f"agreement {diagram.overall_agreement:.4f}"
            )
        else:
            print(f"{video_id}: {len(timeline.segments)} segments")
    write_manifest(out, "timeline", cfg, {"preds": args.preds}, outputs, args.config)
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file (lowest-priority layer)")
    p.add_argument("--seed", type=int, help="RNG seed (generated if omitted)")


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--split", help="split JSON (default: derive 60/10/30)")
    p.add_argument("--vocab", help="vocabulary JSON file")
    p.add_argument("--task", choices=["gesture", "phase"], help="bundled vocabulary")
    p.add_argument("--epochs", type=int, dest="epochs")
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--batch", type=int, dest="batch_size")
    p.add_argument(
        "--balancing", choices=["upsample", "downsample", "none"], dest="balancing"
    )
    p.add_argument("--unfreeze-k", type=int, dest="unfreeze_last_k")
    p.add_argument(
        "--train-projections", action="store_const", const=True,
        dest="train_projections",
    )
    p.add_argument(
        "--train-logit-scale", action="store_const", const=True,
        dest="train_logit_scale",
    )
    p.add_argument("--encoder", choices=["surrogate", "clip"], dest="encoder")
    p.add_argument("--pretrained", help="pretrained backbone name or path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surgline",
        description="Language-grounded surgical video timelines",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int, dest="per_class")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--noise", type=float)
    p.add_argument("--videos", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="parse annotations and sample frames")
    p.add_argument("--manifest", required=True, help="source manifest JSON")
    p.add_argument("--stride", type=int)
    p.add_argument("--vocab", help="vocabulary JSON file")
    _add_common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("split", help="build a video-level train/val/test split")
    p.add_argument("--dataset", help="dataset directory to read video ids from")
    p.add_argument("--videos", help="comma-separated video ids")
    p.add_argument("--ratios", help="three ratios, e.g. 0.6,0.1,0.3")
    p.add_argument("--counts", help="three absolute counts, e.g. 9,1,3")
    _add_common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("balance", help="rebalance the train split of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--mode", choices=["upsample", "downsample"], dest="mode")
    _add_common(p)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("train-gestures", help="gesture fine-tuning stage")
    _add_training_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_gestures)

    p = sub.add_parser("train-phases", help="phase stage from a gesture checkpoint")
    p.add_argument("--init", required=True, help="gesture-stage checkpoint")
    _add_training_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_phases)

    p = sub.add_parser("train-control", help="phase-only control run")
    p.add_argument("--long", action="store_true", help="65-epoch control")
    _add_training_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_control)

    p = sub.add_parser("probe", help="linear probe on frozen embeddings")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split")
    p.add_argument("--vocab")
    p.add_argument("--task", choices=["gesture", "phase"])
    p.add_argument("--checkpoint", help="encoder checkpoint (default: base)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--batch", type=int, dest="batch_size")
    p.add_argument("--encoder", choices=["surrogate", "clip"])
    p.add_argument("--pretrained")
    _add_common(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="metrics and confusion matrices")
    p.add_argument("--preds", help="prediction dump CSV")
    p.add_argument("--dataset", help="dataset directory (compute predictions)")
    p.add_argument("--split")
    p.add_argument("--part", choices=["train", "val", "test"], default="test")
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--task", choices=["gesture", "phase"])
    p.add_argument("--k", help="comma-separated top-k values (default 1,5)")
    p.add_argument("--prototypes", choices=["mean_of_texts", "canonical_only", "max_sim"])
    p.add_argument("--encoder", choices=["surrogate", "clip"])
    p.add_argument("--pretrained")
    p.add_argument("--batch", type=int, dest="batch_size")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("timeline", help="timelines, narratives, phase diagrams")
    p.add_argument("--preds", required=True, help="prediction dump CSV")
    p.add_argument("--window", type=int)
    p.add_argument("--vocab")
    p.add_argument("--task", choices=["gesture", "phase"])
    _add_common(p)
    p.set_defaults(func=cmd_timeline)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    # single-threaded torch keeps surrogate runs bit-reproducible
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        CliError,
        ValueError,
        VocabularyError,
        AnnotationError,
        SplitError,
        FileNotFoundError,
        RuntimeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
