"""Dual image/text encoders and selective layer unfreezing.

Two interchangeable encoders share one contract: ``encode_images`` and
``encode_texts`` return L2-normalized embeddings in a joint space, and the
underlying torch module follows CLIP parameter naming
(``text_model.encoder.layers.{i}``, ``vision_model.encoder.layers.{i}``,
``visual_projection``, ``text_projection``, ``logit_scale``) so one freeze
policy applies to both.

* ``SurrogateEncoder``: a small, dependency-free transformer pair with
  seed-deterministic weights and a hash tokenizer. Fast enough to train on
  a CPU in seconds; used by tests and by the surrogate CLI mode.
* ``ClipBackboneEncoder``: wraps a ``transformers`` CLIP model, either a
  pretrained checkpoint or a randomly initialized offline config.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

DEFAULT_LOGIT_SCALE_INIT = math.log(1.0 / 0.07)

_LAYER_PARAM_RE = re.compile(
    r"(?:^|\.)(text_model|vision_model)\.encoder\.layers\.(\d+)\."
)


# ---------------------------------------------------------------------------
# Freeze policy


@dataclass(frozen=True)
class FreezePolicy:
    """Which parts of a dual encoder may receive gradient updates.

    Only the last ``unfreeze_last_k`` transformer blocks of each tower are
    trained; everything else, including the projections and the similarity
    scale, stays frozen unless explicitly enabled.
    """

    unfreeze_last_k: int = 3
    train_projections: bool = False
    train_logit_scale: bool = False

    def __post_init__(self):
        if self.unfreeze_last_k < 0:
            raise ValueError(
                f"unfreeze_last_k must be >= 0, got {self.unfreeze_last_k}"
            )


@dataclass(frozen=True)
class FreezeSummary:
    """Parameter accounting after a freeze policy was applied."""

    n_trainable: int
    n_total: int
    trainable_names: tuple[str, ...]

    @property
    def fraction_trainable(self) -> float:
        return self.n_trainable / self.n_total if self.n_total else 0.0


def tower_depths(module: nn.Module) -> dict[str, int]:
    """Number of transformer blocks in each tower, read off parameter names."""
    seen: dict[str, set[int]] = {"text_model": set(), "vision_model": set()}
    for name, _ in module.named_parameters():
        m = _LAYER_PARAM_RE.search(name)
        if m:
            seen[m.group(1)].add(int(m.group(2)))
    for tower, ids in seen.items():
        if not ids:
            raise ValueError(f"module has no {tower}.encoder.layers parameters")
    return {tower: max(ids) + 1 for tower, ids in seen.items()}


def apply_freeze_policy(module: nn.Module, policy: FreezePolicy) -> FreezeSummary:
    """Set ``requires_grad`` across the module according to ``policy``.

    Raises ValueError when ``unfreeze_last_k`` exceeds the depth of either
    tower.
    """
    depths = tower_depths(module)
    for tower, depth in depths.items():
        if policy.unfreeze_last_k > depth:
            raise ValueError(
                f"unfreeze_last_k={policy.unfreeze_last_k} exceeds the "
                f"{depth} blocks of {tower}"
            )
    wanted_layers = {
        (tower, i)
        for tower, depth in depths.items()
        for i in range(depth - policy.unfreeze_last_k, depth)
    }

    trainable_names = []
    n_trainable = 0
    n_total = 0
    for name, param in module.named_parameters():
        n_total += param.numel()
        trainable = False
        m = _LAYER_PARAM_RE.search(name)
        if m and (m.group(1), int(m.group(2))) in wanted_layers:
            trainable = True
        leaf = name.split(".")
        if policy.train_projections and (
            "visual_projection" in leaf or "text_projection" in leaf
        ):
            trainable = True
        if policy.train_logit_scale and leaf[-1] == "logit_scale":
            trainable = True
        param.requires_grad_(trainable)
        if trainable:
            trainable_names.append(name)
            n_trainable += param.numel()
    return FreezeSummary(
        n_trainable=n_trainable,
        n_total=n_total,
        trainable_names=tuple(trainable_names),
    )


# ---------------------------------------------------------------------------
# Shared helpers


def as_image_batch(images) -> torch.Tensor:
    """Coerce image input to a float32 (N, 3, H, W) tensor.

    Accepts a single image or a batch, channels first or last, ndarray or
    tensor. Pixel values are expected in [0, 1].
    """
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    x = x.to(torch.float32)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4:
        raise ValueError(f"expected 3D or 4D image input, got shape {tuple(x.shape)}")
    if x.shape[-1] == 3 and x.shape[1] != 3:
        x = x.permute(0, 3, 1, 2)
    if x.shape[1] != 3:
        raise ValueError(f"expected 3 channels, got shape {tuple(x.shape)}")
    return x.contiguous()


def hash_token_ids(
    texts: Sequence[str], vocab_size: int, context_length: int
) -> torch.Tensor:
    """Map texts to fixed-length id sequences with a stable hash vocabulary.

    Id 0 is padding; words hash into [1, vocab_size). Deterministic across
    runs and platforms. A text with no alphanumeric words is rejected.
    """
    rows = []
    for text in texts:
        words = re.findall(r"[a-z0-9]+", text.lower())
        if not words:
            raise ValueError(f"text has no tokenizable words: {text!r}")
        ids = [
            int.from_bytes(hashlib.md5(w.encode("utf-8")).digest()[:4], "little")
            % (vocab_size - 1)
            + 1
            for w in words[:context_length]
        ]
        ids.extend([0] * (context_length - len(ids)))
        rows.append(ids)
    return torch.tensor(rows, dtype=torch.long)


# ---------------------------------------------------------------------------
# Surrogate encoder


class _Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width)
        )

    def forward(self, x: torch.Tensor, key_padding_mask=None) -> torch.Tensor:
        h = self.ln1(x)
        attn_out, _ = self.attn(
            h, h, h, key_padding_mask=key_padding_mask, need_weights=False
        )
        x = x + attn_out
        return x + self.mlp(self.ln2(x))


class _Encoder(nn.Module):
    def __init__(self, depth: int, width: int, heads: int):
        super().__init__()
        self.layers = nn.ModuleList(_Block(width, heads) for _ in range(depth))

    def forward(self, x: torch.Tensor, key_padding_mask=None) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x, key_padding_mask=key_padding_mask)
        return x


class _TextTower(nn.Module):
    def __init__(self, vocab_size: int, context_length: int, depth: int, width: int, heads: int):
        super().__init__()
        self.token_embedding = nn.Embedding(vocab_size, width, padding_idx=0)
        self.position_embedding = nn.Parameter(torch.zeros(context_length, width))
        self.encoder = _Encoder(depth, width, heads)
        self.final_norm = nn.LayerNorm(width)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        pad = token_ids == 0
        x = self.token_embedding(token_ids) + self.position_embedding[: token_ids.shape[1]]
        x = self.encoder(x, key_padding_mask=pad)
        x = self.final_norm(x)
        keep = (~pad).to(x.dtype).unsqueeze(-1)
        return (x * keep).sum(dim=1) / keep.sum(dim=1)


class _VisionTower(nn.Module):
    def __init__(self, grid: int, depth: int, width: int, heads: int):
        super().__init__()
        self.grid = grid
        self.patch_embedding = nn.Linear(3, width)
        self.position_embedding = nn.Parameter(torch.zeros(grid * grid, width))
        self.encoder = _Encoder(depth, width, heads)
        self.final_norm = nn.LayerNorm(width)

    def forward(self, pixel_values: torch.Tensor) -> torch.Tensor:
        pooled = torch.nn.functional.adaptive_avg_pool2d(pixel_values, self.grid)
        patches = pooled.flatten(2).transpose(1, 2)
        x = self.patch_embedding(patches) + self.position_embedding
        x = self.encoder(x)
        return self.final_norm(x).mean(dim=1)


class SurrogateEncoder(nn.Module):
    """Small seed-deterministic dual encoder for CPU-scale experiments.

    Both towers are 4-block pre-norm transformers over a 32-wide stream;
    images of any resolution are average-pooled to a 4x4 patch grid and
    texts are tokenized by hashing, so no external weights, tokenizers, or
    downloads are involved. Two instances built with the same seed have
    identical parameters.
    """

    kind = "surrogate"

    def __init__(
        self,
        embed_dim: int = 32,
        width: int = 32,
        depth: int = 4,
        heads: int = 4,
        grid: int = 4,
        vocab_size: int = 4096,
        context_length: int = 24,
        seed: int = 0,
    ):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.embed_dim = embed_dim
        self.context_length = context_length
        self.vocab_size = vocab_size
        self.text_model = _TextTower(vocab_size, context_length, depth, width, heads)
        self.vision_model = _VisionTower(grid, depth, width, heads)
        self.text_projection = nn.Linear(width, embed_dim, bias=False)
        self.visual_projection = nn.Linear(width, embed_dim, bias=False)
        self.logit_scale = nn.Parameter(torch.tensor(DEFAULT_LOGIT_SCALE_INIT))
        self._deterministic_init(seed)

    def _deterministic_init(self, seed: int) -> None:
        # walk parameters in sorted name order so init is independent of
        # module registration order; fan-in scaling keeps signal variance
        # healthy at this small width
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, param in sorted(self.named_parameters()):
                leaf = name.split(".")[-1]
                if name == "logit_scale":
                    param.fill_(DEFAULT_LOGIT_SCALE_INIT)
                elif leaf == "bias":
                    param.zero_()
                elif param.ndim == 1:
                    param.fill_(1.0)
                else:
                    fan_in = param.shape[-1]
                    param.normal_(0.0, fan_in ** -0.5, generator=gen)
            self.text_model.token_embedding.weight[0].zero_()

    @property
    def scale(self) -> torch.Tensor:
        """Similarity multiplier applied to cosine logits."""
        return self.logit_scale.exp()

    def tokenize(self, texts: Sequence[str]) -> torch.Tensor:
        return hash_token_ids(texts, self.vocab_size, self.context_length)

    def encode_texts(self, texts: Sequence[str]) -> torch.Tensor:
        feats = self.text_model(self.tokenize(texts))
        emb = self.text_projection(feats)
        return emb / emb.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def encode_images(self, images) -> torch.Tensor:
        feats = self.vision_model(as_image_batch(images))
        emb = self.visual_projection(feats)
        return emb / emb.norm(dim=-1, keepdim=True).clamp_min(1e-12)


# ---------------------------------------------------------------------------
# CLIP backbone adapter


# image normalization constants used by CLIP preprocessing
_CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
_CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class ClipBackboneEncoder(nn.Module):
    """Adapter exposing a ``transformers`` CLIP model through the shared
    encoder contract.

    ``pretrained`` names a checkpoint to load (needs network or a local
    cache); with ``pretrained=None`` a randomly initialized model is built
    offline from the default CLIP configuration, which is enough for
    structural work such as freeze accounting. The ``transformers``
    dependency is imported lazily.
    """

    kind = "pretrained_backbone"

    def __init__(self, pretrained: str | None = None, cache_dir: str | None = None):
        super().__init__()
        try:
            from transformers import CLIPConfig, CLIPModel
        except ImportError as exc:
            raise ImportError(
                "ClipBackboneEncoder needs the 'transformers' package; "
                "install the [backbone] extra"
            ) from exc
        if pretrained is None:
            self.model = CLIPModel(CLIPConfig())
            self._tokenizer = None
        else:
            self.model = CLIPModel.from_pretrained(pretrained, cache_dir=cache_dir)
            from transformers import AutoTokenizer

            self._tokenizer = AutoTokenizer.from_pretrained(
                pretrained, cache_dir=cache_dir
            )
        self.image_size = self.model.config.vision_config.image_size
        self.embed_dim = self.model.config.projection_dim

    @property
    def logit_scale(self) -> torch.Tensor:
        return self.model.logit_scale

    @property
    def scale(self) -> torch.Tensor:
        return self.model.logit_scale.exp()

    def tokenize(self, texts: Sequence[str]) -> torch.Tensor:
        if self._tokenizer is not None:
            enc = self._tokenizer(
                list(texts), padding=True, truncation=True, return_tensors="pt"
            )
            return enc["input_ids"]
        cfg = self.model.config.text_config
        return hash_token_ids(
            texts, cfg.vocab_size, min(cfg.max_position_embeddings, 24)
        )

    def encode_texts(self, texts: Sequence[str]) -> torch.Tensor:
        ids = self.tokenize(texts)
        # call the submodel and project explicitly; get_text_features has
        # changed return types across transformers major versions
        out = self.model.text_model(input_ids=ids)
        pooled = out.pooler_output if hasattr(out, "pooler_output") else out[1]
        emb = self.model.text_projection(pooled)
        return emb / emb.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def encode_images(self, images) -> torch.Tensor:
        x = as_image_batch(images)
        x = torch.nn.functional.interpolate(
            x, size=(self.image_size, self.image_size), mode="bilinear",
            align_corners=False,
        )
        mean = torch.tensor(_CLIP_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(_CLIP_STD).view(1, 3, 1, 1)
        x = (x - mean) / std
        out = self.model.vision_model(pixel_values=x)
        pooled = out.pooler_output if hasattr(out, "pooler_output") else out[1]
        emb = self.model.visual_projection(pooled)
        return emb / emb.norm(dim=-1, keepdim=True).clamp_min(1e-12)
