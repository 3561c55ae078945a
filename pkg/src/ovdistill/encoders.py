"""Toy dual-encoder (visual + text) transformers.

A DualEncoder pairs a per-frame vision transformer with a small text
transformer sharing one embedding width, and is built in either of two
roles: a frozen teacher or a tunable student.  The student may carry a
light cross-frame mixing layer the teacher does not have, and can be
wrapped with bottleneck adapters for parameter-efficient tuning.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings

import torch
import torch.nn as nn
import torch.nn.functional as F

ROLE_TEACHER = "teacher"
ROLE_STUDENT = "student"


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    embed_width: int = 128
    depth: int = 4
    heads: int = 4
    text_vocab_size: int = 512
    max_text_length: int = 32
    image_size: int = 32
    temporal_mixing: bool = False
    record_attention: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.embed_width % self.heads != 0:
            raise ValueError(
                f"embed width {self.embed_width} not divisible by {self.heads} heads"
            )
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}"
            )
        if self.text_vocab_size < 1 or self.max_text_length < 1:
            raise ValueError("text vocab size and max text length must be positive")

    @property
    def patches_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class SelfAttention(nn.Module):
    """Multi-head self-attention that can record its last attention map."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_weights = None  # (B, heads, S, S) when recorded

    def forward(self, x: torch.Tensor, record: bool = False) -> torch.Tensor:
        b, s, c = x.shape
        d = c // self.heads
        qkv = self.qkv(x).reshape(b, s, 3, self.heads, d).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        if record:
            self.last_weights = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, s, c)
        return self.proj(out)


class Bottleneck(nn.Module):
    """Residual down/up adapter; zero-initialized up-projection makes it an
    identity at construction."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.down = nn.Linear(dim, hidden)
        self.up = nn.Linear(hidden, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.up(F.gelu(self.down(x), approximate="none"))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(approximate="none"),
            nn.Linear(mlp_ratio * dim, dim),
        )
        self.adapter: Bottleneck | None = None

    def forward(self, x: torch.Tensor, record: bool = False) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), record=record)
        x = x + self.mlp(self.ln2(x))
        if self.adapter is not None:
            x = self.adapter(x)
        return x


class VisualEncoder(nn.Module):
    """Per-frame ViT returning the global-token embedding of each frame.

    Positional embeddings are learnable and start at zero, so a constant
    frame yields exactly uniform patch attention at initialization.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        c = config.embed_width
        self.config = config
        self.patch_embed = nn.Conv2d(3, c, config.patch_size, stride=config.patch_size)
        self.cls_token = nn.Parameter(torch.randn(1, 1, c) * 0.02)
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + config.patches_per_frame, c))
        self.blocks = nn.ModuleList(
            Block(c, config.heads) for _ in range(config.depth)
        )
        self.ln_final = nn.LayerNorm(c)

    def forward(self, frames: torch.Tensor, record: bool = False) -> torch.Tensor:
        b = frames.shape[0]
        x = self.patch_embed(frames).flatten(2).transpose(1, 2)  # B, P, C
        cls = self.cls_token.expand(b, -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for i, blk in enumerate(self.blocks):
            x = blk(x, record=record and i == len(self.blocks) - 1)
        return self.ln_final(x)[:, 0]


class TextEncoder(nn.Module):
    """Token-sequence transformer returning one global-token embedding."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        c = config.embed_width
        self.config = config
        self.token_embed = nn.Embedding(config.text_vocab_size, c)
        # A strong embedding init keeps prompt representations well separated;
        # tiny embeddings let the contrastive objective collapse every prompt
        # onto the same direction before the tokens can differentiate.
        nn.init.normal_(self.token_embed.weight, std=0.5)
        self.cls_token = nn.Parameter(torch.randn(1, 1, c) * 0.02)
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + config.max_text_length, c))
        self.blocks = nn.ModuleList(
            Block(c, config.heads) for _ in range(config.depth)
        )
        self.ln_final = nn.LayerNorm(c)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        x = self.token_embed(token_ids)[None]  # 1, L, C
        cls = self.cls_token
        x = torch.cat([cls, x], dim=1) + self.pos_embed[:, : x.shape[1] + 1]
        for blk in self.blocks:
            x = blk(x)
        return self.ln_final(x)[0, 0]


class TemporalMixer(nn.Module):
    """One residual cross-frame attention layer (student-only).

    Deliberately not zero-initialized: a freshly built student with mixing
    enabled already behaves differently from the teacher on non-static clips.
    """

    def __init__(self, dim: int, heads: int, init_scale: float = 0.1):
        super().__init__()
        self.ln = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        with torch.no_grad():
            self.attn.proj.weight.mul_(init_scale)

    def forward(self, frame_feats: torch.Tensor) -> torch.Tensor:
        return frame_feats + self.attn(self.ln(frame_feats[None]))[0]


class DualEncoder(nn.Module):
    """Paired visual + text encoder in a teacher or student role."""

    def __init__(self, config: EncoderConfig, role: str):
        super().__init__()
        if role not in (ROLE_TEACHER, ROLE_STUDENT):
            raise ValueError(f"unknown role {role!r}")
        self.config = config
        self.role = role
        self.visual = VisualEncoder(config)
        self.text = TextEncoder(config)
        self.temporal = None
        if config.temporal_mixing and role == ROLE_STUDENT:
            self.temporal = TemporalMixer(config.embed_width, config.heads)
        if role == ROLE_TEACHER:
            self.requires_grad_(False)

    # -- validation helpers -------------------------------------------------

    def _check_video(self, video: torch.Tensor) -> torch.Tensor:
        video = torch.as_tensor(video)
        if video.ndim != 4 or video.shape[1] != 3:
            raise ValueError(f"expected video of shape T x 3 x H x W, got {tuple(video.shape)}")
        t, _, h, w = video.shape
        if t < 1:
            raise ValueError("video must contain at least one frame")
        if h % self.config.patch_size or w % self.config.patch_size:
            raise ValueError(
                f"frame size {h}x{w} not divisible by patch size {self.config.patch_size}"
            )
        if h != self.config.image_size or w != self.config.image_size:
            raise ValueError(
                f"frame size {h}x{w} does not match configured image size "
                f"{self.config.image_size}"
            )
        if not torch.isfinite(video).all():
            raise ValueError("video contains non-finite values")
        return video.to(self.cls_dtype())

    def cls_dtype(self) -> torch.dtype:
        return self.visual.cls_token.dtype

    # -- operations ---------------------------------------------------------

    def encode_video_frames(self, video: torch.Tensor) -> torch.Tensor:
        """Encode each frame independently to its global-token embedding;
        applies the cross-frame mixer afterwards when enabled."""
        video = self._check_video(video)
        feats = self.visual(video)
        if self.temporal is not None:
            feats = self.temporal(feats)
        return feats

    def encode_text(self, token_ids) -> torch.Tensor:
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.ndim != 1:
            raise ValueError("token ids must be a flat sequence")
        if ids.numel() > self.config.max_text_length:
            warnings.warn(
                f"token sequence of length {ids.numel()} truncated to "
                f"{self.config.max_text_length}",
                stacklevel=2,
            )
            ids = ids[: self.config.max_text_length]
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.config.text_vocab_size):
            raise ValueError("token id outside encoder vocabulary")
        return self.text(ids)

    def cls_attention(self, video: torch.Tensor) -> torch.Tensor:
        """Last-layer, head-averaged attention from the global token to the
        patch tokens, one row per frame (T x P).

        The full row including the global token's self-attention is left in
        ``visual.blocks[-1].attn.last_weights``.
        """
        if not self.config.record_attention:
            raise ValueError("encoder was built without attention recording")
        video = self._check_video(video)
        with torch.no_grad():
            self.visual(video, record=True)
        attn = self.visual.blocks[-1].attn.last_weights  # T, heads, S, S
        row = attn.mean(dim=1)[:, 0, :]  # T, 1 + P
        return row[:, 1:]

    def encode_clip_batch(self, videos: torch.Tensor) -> torch.Tensor:
        """Pooled embeddings for a batch of clips (B x T x 3 x H x W -> B x C).

        Equivalent to encode_video_frames + pool_frames per clip; all frames
        go through the frame encoder in one batched call.
        """
        videos = torch.as_tensor(videos)
        if videos.ndim != 5:
            raise ValueError(f"expected B x T x 3 x H x W, got {tuple(videos.shape)}")
        b, t = videos.shape[:2]
        flat = self._check_video(videos.reshape(b * t, *videos.shape[2:]))
        feats = self.visual(flat).reshape(b, t, -1)
        if self.temporal is not None:
            feats = torch.stack([self.temporal(f) for f in feats])
        return feats.mean(dim=1)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def pool_frames(features: torch.Tensor) -> torch.Tensor:
    """Arithmetic mean over the frame axis; unnormalized."""
    features = torch.as_tensor(features)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError(f"expected non-empty T x C features, got {tuple(features.shape)}")
    return features.mean(dim=0)


def build_toy_dual_encoder(config: EncoderConfig, role: str) -> DualEncoder:
    """Seeded constructor: teacher and student builds from the same config
    are parameter-wise identical on the modules they share."""
    torch.manual_seed(config.seed)
    return DualEncoder(config, role)


def student_from_teacher(
    teacher: DualEncoder,
    temporal_mixing: bool = False,
    adapter_bottleneck: int | None = None,
) -> DualEncoder:
    """Build a trainable student initialized from the teacher's weights,
    optionally with cross-frame mixing and/or bottleneck adapters."""
    cfg = dataclasses.replace(teacher.config, temporal_mixing=temporal_mixing)
    student = build_toy_dual_encoder(cfg, ROLE_STUDENT)
    state = student.state_dict()
    for name, tensor in teacher.state_dict().items():
        state[name] = tensor.clone()
    student.load_state_dict(state)
    if adapter_bottleneck is not None:
        wrap_with_adapters(student, adapter_bottleneck)
    return student


def wrap_with_adapters(model: DualEncoder, bottleneck_width: int, seed: int | None = None) -> DualEncoder:
    """Freeze the student backbone and insert trainable bottleneck adapters
    after every transformer block.  Identity at construction."""
    if model.role != ROLE_STUDENT:
        raise ValueError("adapters can only wrap a student encoder")
    if bottleneck_width < 1:
        raise ValueError("bottleneck width must be positive")
    torch.manual_seed(model.config.seed + 7919 if seed is None else seed)
    model.requires_grad_(False)
    dim = model.config.embed_width
    for blk in list(model.visual.blocks) + list(model.text.blocks):
        blk.adapter = Bottleneck(dim, bottleneck_width).to(model.cls_dtype())
    if not model.trainable_parameters():
        raise AssertionError("wrapped student has no trainable parameters")
    return model
