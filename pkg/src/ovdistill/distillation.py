"""Feature-distillation heads and losses.

Three selectable ways of matching student features to a frozen teacher:
directly, through a two-layer MLP projector, or through a residual head
whose zero-initialized second projection makes it an exact identity at
construction.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANT_DIRECT = "direct"
VARIANT_PROJECTOR = "projector"
VARIANT_RESIDUAL = "residual"
VARIANTS = (VARIANT_DIRECT, VARIANT_PROJECTOR, VARIANT_RESIDUAL)


class ResidualHead(nn.Module):
    """z -> z + alpha * W2(gelu(W1 z)).

    W2 starts at zero so the head is the identity until trained; alpha
    balances how far the transformed feature may move from the input.
    GELU is the exact error-function form.
    """

    def __init__(self, width: int, alpha: float = 0.1):
        super().__init__()
        if width < 1:
            raise ValueError("width must be positive")
        if not (alpha >= 0.0 and alpha == alpha):
            raise ValueError(f"alpha must be finite and >= 0, got {alpha}")
        self.width = width
        self.alpha = float(alpha)
        self.fc1 = nn.Linear(width, width, bias=False)  # default init: uniform +-1/sqrt(C)
        self.fc2 = nn.Linear(width, width, bias=False)
        nn.init.zeros_(self.fc2.weight)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.width:
            raise ValueError(f"feature width {z.shape[-1]} != head width {self.width}")
        return z + self.alpha * self.fc2(F.gelu(self.fc1(z), approximate="none"))


class ProjectorHead(nn.Module):
    """z -> W2(gelu(W1 z)); no identity path."""

    def __init__(self, width: int):
        super().__init__()
        if width < 1:
            raise ValueError("width must be positive")
        self.width = width
        self.fc1 = nn.Linear(width, width, bias=False)
        self.fc2 = nn.Linear(width, width, bias=False)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.width:
            raise ValueError(f"feature width {z.shape[-1]} != head width {self.width}")
        return self.fc2(F.gelu(self.fc1(z), approximate="none"))


def fd_loss(teacher_feat: torch.Tensor, candidate_feat: torch.Tensor) -> torch.Tensor:
    """L2 distance between teacher and candidate features, averaged over the
    leading batch dimension when present."""
    if teacher_feat.shape != candidate_feat.shape:
        raise ValueError(
            f"shape mismatch: {tuple(teacher_feat.shape)} vs {tuple(candidate_feat.shape)}"
        )
    if not (torch.isfinite(teacher_feat).all() and torch.isfinite(candidate_feat).all()):
        raise ValueError("non-finite features in distillation loss")
    diff = teacher_feat - candidate_feat
    norms = torch.linalg.vector_norm(diff, dim=-1)
    return norms.mean()


def branch_fd_loss(variant, head, teacher_feats, student_feats) -> torch.Tensor:
    """Distillation loss of one branch under the selected variant.

    Teacher features are detached: gradients reach only the student features
    and, for the projector/residual variants, the head parameters.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown distillation variant {variant!r}")
    teacher_feats = teacher_feats.detach()
    if variant == VARIANT_DIRECT:
        if head is not None:
            raise ValueError("direct variant takes no head")
        candidate = student_feats
    elif variant == VARIANT_PROJECTOR:
        if not isinstance(head, ProjectorHead):
            raise ValueError("projector variant requires a ProjectorHead")
        candidate = head(student_feats)
    else:
        if not isinstance(head, ResidualHead):
            raise ValueError("residual variant requires a ResidualHead")
        candidate = head(student_feats)
    return fd_loss(teacher_feats, candidate)


def total_fd_loss(vision_loss, text_loss) -> torch.Tensor:
    """Sum of the vision- and text-branch distillation losses."""
    vision_loss = torch.as_tensor(vision_loss)
    text_loss = torch.as_tensor(text_loss)
    for name, v in (("vision", vision_loss), ("text", text_loss)):
        if not torch.isfinite(v).all():
            raise ValueError(f"non-finite {name} distillation loss")
    return vision_loss + text_loss
