"""Multi-positive contrastive loss over a shared image/text embedding space.

The loss operates on a scaled cosine similarity matrix. For every image the
positives are all texts of the same class, and symmetrically for every
text, so a batch may pair one image with several captions and vice versa.
With an identity positive mask the loss reduces exactly to the standard
symmetric InfoNCE.

All softmax terms are computed with log-sum-exp stabilization via
``log_softmax``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

DEFAULT_LOGIT_SCALE = 1.0 / 0.07


def similarity_logits(
    image_emb: torch.Tensor,
    text_emb: torch.Tensor,
    logit_scale: float | torch.Tensor = DEFAULT_LOGIT_SCALE,
) -> torch.Tensor:
    """Scaled pairwise dot products, images as rows and texts as columns.

    Rows are expected to be unit vectors (the encoders normalize), so
    entries lie in [-logit_scale, logit_scale].
    """
    if image_emb.ndim != 2 or text_emb.ndim != 2:
        raise ValueError(
            f"expected 2D embeddings, got shapes {tuple(image_emb.shape)} "
            f"and {tuple(text_emb.shape)}"
        )
    if image_emb.shape[1] != text_emb.shape[1]:
        raise ValueError(
            f"embedding width mismatch: {image_emb.shape[1]} vs {text_emb.shape[1]}"
        )
    scale = torch.as_tensor(logit_scale, dtype=image_emb.dtype, device=image_emb.device)
    if scale.numel() != 1 or scale.item() <= 0:
        raise ValueError("logit_scale must be a positive scalar")
    return scale * image_emb @ text_emb.T


def class_positive_mask(
    image_labels: Sequence[str], text_labels: Sequence[str]
) -> torch.Tensor:
    """Boolean (n_images, n_texts) mask marking same-class pairs positive."""
    rows = list(image_labels)
    cols = list(text_labels)
    return torch.tensor([[a == b for b in cols] for a in rows], dtype=torch.bool)


@dataclass(frozen=True)
class LossOutput:
    """Symmetric loss value and its two directional terms (scalar tensors)."""

    value: torch.Tensor
    image_to_text: torch.Tensor
    text_to_image: torch.Tensor


def multi_positive_infonce(logits: torch.Tensor, mask: torch.Tensor) -> LossOutput:
    """Symmetric InfoNCE averaged over each anchor's full positive set.

    The image-to-text term is, per image (row), the mean negative
    log-softmax over that image's positive texts; the text-to-image term
    mirrors it over columns; the value is the mean of the two directions.
    Every row and every column of ``mask`` must contain at least one
    positive, otherwise the per-anchor mean is undefined and a ValueError
    is raised. Non-finite logits are rejected.
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2D, got shape {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain NaN or Inf")
    if mask.shape != logits.shape:
        raise ValueError(
            f"mask shape {tuple(mask.shape)} does not match logits shape "
            f"{tuple(logits.shape)}"
        )
    if mask.dtype != torch.bool:
        raise ValueError("positive mask must be a boolean tensor")
    mask = mask.to(device=logits.device)
    row_counts = mask.sum(dim=1)
    col_counts = mask.sum(dim=0)
    if (row_counts == 0).any():
        bad = torch.nonzero(row_counts == 0).flatten().tolist()
        raise ValueError(f"images without any positive text: rows {bad}")
    if (col_counts == 0).any():
        bad = torch.nonzero(col_counts == 0).flatten().tolist()
        raise ValueError(f"texts without any positive image: columns {bad}")

    fmask = mask.to(logits.dtype)
    log_p_i2t = torch.log_softmax(logits, dim=1)
    per_image = -(log_p_i2t * fmask).sum(dim=1) / row_counts.to(logits.dtype)
    i2t = per_image.mean()

    log_p_t2i = torch.log_softmax(logits, dim=0)
    per_text = -(log_p_t2i * fmask).sum(dim=0) / col_counts.to(logits.dtype)
    t2i = per_text.mean()

    return LossOutput(value=0.5 * (i2t + t2i), image_to_text=i2t, text_to_image=t2i)


def contrastive_loss(
    image_emb: torch.Tensor,
    text_emb: torch.Tensor,
    mask: torch.Tensor,
    logit_scale: float | torch.Tensor = DEFAULT_LOGIT_SCALE,
) -> LossOutput:
    """Compose similarity scoring and the multi-positive loss."""
    return multi_positive_infonce(similarity_logits(image_emb, text_emb, logit_scale), mask)


def standard_infonce(logits: torch.Tensor) -> LossOutput:
    """Plain symmetric InfoNCE: positive pairs on the diagonal only."""
    n, m = logits.shape
    if n != m:
        raise ValueError("standard InfoNCE needs a square logits matrix")
    eye = torch.eye(n, dtype=torch.bool, device=logits.device)
    return multi_positive_infonce(logits, eye)


def gradient_check(
    loss_fn: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor],
    image_emb: torch.Tensor,
    text_emb: torch.Tensor,
    mask: torch.Tensor,
    epsilon: float = 1e-6,
) -> float:
    """Compare autograd gradients of ``loss_fn`` against central differences.

    ``loss_fn(img, txt, mask)`` must return a scalar tensor. Both paths run
    in float64. Returns the maximum relative error over every coordinate of
    both embedding matrices, where the relative error between analytic
    ``a`` and numeric ``n`` is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    img = image_emb.detach().to(torch.float64).clone().requires_grad_(True)
    txt = text_emb.detach().to(torch.float64).clone().requires_grad_(True)

    loss_fn(img, txt, mask).backward()
    analytic = {"image": img.grad.clone(), "text": txt.grad.clone()}

    img_flat = img.detach()
    txt_flat = txt.detach()

    def value() -> float:
        with torch.no_grad():
            return float(loss_fn(img_flat, txt_flat, mask))

    worst = 0.0
    for name, base in (("image", img_flat), ("text", txt_flat)):
        flat = base.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + epsilon
            up = value()
            flat[i] = orig - epsilon
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = grad[i].item()
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, rel)
    return worst
