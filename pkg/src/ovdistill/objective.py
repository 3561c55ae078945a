"""Similarity-based classification logits and the combined training loss."""

from __future__ import annotations

import torch
import torch.nn.functional as F

DEFAULT_LOGIT_SCALE = 100.0


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("cannot normalize a zero-norm embedding")
    return x / norms


def similarity_logits(
    video_embs: torch.Tensor,
    text_embs: torch.Tensor,
    logit_scale: float = DEFAULT_LOGIT_SCALE,
) -> torch.Tensor:
    """Scaled cosine similarities, N videos x K classes.

    Both sides are unit-normalized first, so positive rescaling of any
    embedding leaves the logits unchanged.
    """
    if logit_scale <= 0:
        raise ValueError("logit scale must be positive")
    if video_embs.shape[-1] != text_embs.shape[-1]:
        raise ValueError(
            f"embedding width mismatch: {video_embs.shape[-1]} vs {text_embs.shape[-1]}"
        )
    v = l2_normalize(video_embs)
    t = l2_normalize(text_embs)
    return logit_scale * (v @ t.T)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -log softmax at the true class."""
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError("labels must align with logits rows")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    log_probs = F.log_softmax(logits, dim=-1)
    return -log_probs[torch.arange(logits.shape[0]), labels].mean()


def total_loss(ce, fd, beta: float) -> torch.Tensor:
    """Classification loss plus beta-weighted distillation loss."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    ce = torch.as_tensor(ce)
    fd = torch.as_tensor(fd)
    if not (torch.isfinite(ce) and torch.isfinite(fd)):
        raise ValueError("non-finite loss component")
    return ce + beta * fd
