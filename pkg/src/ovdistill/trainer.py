"""Optimization loop: schedule, seeding, checkpointing, weight averaging.

Training is a deterministic function of (weights, data, config seed): batch
order, frame sampling, and prompt selection are all derived statelessly from
the seed, so an interrupted run resumed from its last checkpoint follows the
same trajectory as an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import random
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .datasets import Tokenizer, VideoDataset, render_prompts, sample_frames
from .distillation import (
    VARIANT_DIRECT,
    VARIANT_PROJECTOR,
    VARIANT_RESIDUAL,
    VARIANTS,
    ProjectorHead,
    ResidualHead,
    branch_fd_loss,
    total_fd_loss,
)
from .encoders import DualEncoder
from .objective import cross_entropy, l2_normalize, similarity_logits, total_loss

log = logging.getLogger(__name__)

# The published schedule uses 3.33e-6 with a large pretrained backbone; the
# toy encoders train from a far less mature starting point and use 1e-3.
PUBLISHED_BASE_LR = 3.33e-6


class TrainingError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    warmup_epochs: int = 2
    total_epochs: int = 12
    batch_size: int = 8
    frames_per_clip: int = 8
    alpha: float = 0.1
    beta: float = 2.0
    distill_variant: str = VARIANT_RESIDUAL
    distill_on_normalized: bool = False
    text_fd_full_vocab: bool = True
    logit_scale: float = 100.0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs >= self.total_epochs:
            raise ValueError("warmup must be shorter than the full schedule")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.distill_variant not in VARIANTS:
            raise ValueError(f"unknown distillation variant {self.distill_variant!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclasses.dataclass
class StepRecord:
    step: int
    lr: float
    ce: float
    fd_vision: float
    fd_text: float
    total: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclasses.dataclass
class CheckpointMeta:
    epoch: int
    global_step: int
    config_digest: str
    metrics: dict
    path: str


class HeadPair(torch.nn.Module):
    """Independent distillation heads for the vision and text branches."""

    def __init__(self, vision=None, text=None):
        super().__init__()
        self.vision = vision
        self.text = text


def make_heads(variant: str, width: int, alpha: float) -> HeadPair:
    if variant == VARIANT_DIRECT:
        return HeadPair()
    if variant == VARIANT_PROJECTOR:
        return HeadPair(ProjectorHead(width), ProjectorHead(width))
    if variant == VARIANT_RESIDUAL:
        return HeadPair(ResidualHead(width, alpha), ResidualHead(width, alpha))
    raise ValueError(f"unknown distillation variant {variant!r}")


_HEAD_TENSOR_NAMES = {"fc1.weight": "W1", "fc2.weight": "W2"}


def heads_arrays(heads: HeadPair) -> dict[str, np.ndarray]:
    out = {}
    for branch in ("vision", "text"):
        head = getattr(heads, branch)
        if head is None:
            continue
        for tname, public in _HEAD_TENSOR_NAMES.items():
            tensor = head.state_dict()[tname]
            out[f"head.{branch}.{public}"] = tensor.detach().cpu().numpy()
    return out


def apply_heads_arrays(heads: HeadPair, arrays: dict[str, np.ndarray]) -> None:
    for branch in ("vision", "text"):
        head = getattr(heads, branch)
        if head is None:
            continue
        state = {}
        for tname, public in _HEAD_TENSOR_NAMES.items():
            key = f"head.{branch}.{public}"
            if key not in arrays:
                raise KeyError(f"checkpoint is missing head tensor {key}")
            state[tname] = torch.from_numpy(np.array(arrays[key]))
        head.load_state_dict(state)


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over warmup, then half-cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError("need 0 <= warmup_steps < total_steps")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Batches


@dataclasses.dataclass
class Batch:
    videos: torch.Tensor          # B x n x 3 x H x W
    labels: torch.Tensor          # B
    class_token_ids: list[list[int]]  # one tokenized prompt per class


def training_classes(dataset: VideoDataset) -> list[str]:
    present = {e.label for e in dataset.entries}
    return [n for n in dataset.vocab.names if n in present]


def build_batch(
    dataset: VideoDataset,
    indices: list[int],
    classes: list[str],
    tokenizer: Tokenizer,
    config: TrainConfig,
    epoch: int,
    global_step: int,
    dtype=torch.float32,
) -> Batch:
    label_of = {name: i for i, name in enumerate(classes)}
    clips, labels = [], []
    for i in indices:
        entry = dataset.entries[i]
        idx = sample_frames(
            entry.num_frames, config.frames_per_clip, "train",
            seed=f"{config.seed}/{epoch}/{entry.clip_id}",
        )
        frames = np.asarray(dataset.load_frames(entry))[idx]
        clips.append(torch.as_tensor(frames, dtype=dtype))
        labels.append(label_of[entry.label])
    token_ids = []
    for name in classes:
        prompts = render_prompts(dataset.vocab, name, "train",
                                 seed=f"{config.seed}/{global_step}")
        choice = random.Random(f"{config.seed}/{global_step}/{name}").choice(prompts)
        token_ids.append(tokenizer.encode(choice))
    return Batch(torch.stack(clips), torch.tensor(labels), token_ids)


# ---------------------------------------------------------------------------
# Steps and runs


def _encode_clips(model: DualEncoder, videos: torch.Tensor) -> torch.Tensor:
    return model.encode_clip_batch(videos)


def _encode_classes(model: DualEncoder, token_ids: list[list[int]]) -> torch.Tensor:
    return torch.stack([model.encode_text(ids) for ids in token_ids])


def train_step(
    student: DualEncoder,
    teacher: DualEncoder | None,
    heads: HeadPair,
    batch: Batch,
    config: TrainConfig,
    optimizer: torch.optim.Optimizer,
    lr: float,
    step: int = 0,
) -> StepRecord:
    """One combined classification + distillation update on student and heads.

    With no teacher (pretraining) the distillation terms are zero and beta
    must be zero too.
    """
    if teacher is None and config.beta != 0:
        raise ValueError("distillation requires a teacher")

    s_vid = _encode_clips(student, batch.videos)
    s_text = _encode_classes(student, batch.class_token_ids)

    zero = s_vid.new_zeros(())
    if teacher is not None:
        with torch.no_grad():
            t_vid = _encode_clips(teacher, batch.videos)
            t_text = _encode_classes(teacher, batch.class_token_ids)
        s_vid_fd, t_vid_fd = s_vid, t_vid
        s_text_fd, t_text_fd = s_text, t_text
        if config.distill_on_normalized:
            s_vid_fd, t_vid_fd = l2_normalize(s_vid), l2_normalize(t_vid)
            s_text_fd, t_text_fd = l2_normalize(s_text), l2_normalize(t_text)
        if not config.text_fd_full_vocab:
            keep = sorted(set(batch.labels.tolist()))
            s_text_fd, t_text_fd = s_text_fd[keep], t_text_fd[keep]
        fd_v = branch_fd_loss(config.distill_variant, heads.vision, t_vid_fd, s_vid_fd)
        fd_t = branch_fd_loss(config.distill_variant, heads.text, t_text_fd, s_text_fd)
    else:
        fd_v = fd_t = zero
    fd = total_fd_loss(fd_v, fd_t)

    logits = similarity_logits(s_vid, s_text, config.logit_scale)
    ce = cross_entropy(logits, batch.labels)
    loss = total_loss(ce, fd, config.beta)
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss at step {step}: ce={ce.item()} "
            f"fd_v={float(fd_v)} fd_t={float(fd_t)}"
        )

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for g in optimizer.param_groups for p in g["params"]]
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return StepRecord(
        step, lr, float(ce.detach()), float(fd_v.detach()),
        float(fd_t.detach()), float(loss.detach()),
    )


def build_optimizer(student: DualEncoder, heads: HeadPair, config: TrainConfig) -> torch.optim.Optimizer:
    """AdamW with the zero-initialized residual W2 matrices exempt from
    weight decay until the first epoch has finished."""
    w2 = [
        h.fc2.weight
        for h in (heads.vision, heads.text)
        if isinstance(h, ResidualHead)
    ]
    w2_ids = {id(p) for p in w2}
    other_head = [
        p for h in (heads.vision, heads.text) if h is not None
        for p in h.parameters() if id(p) not in w2_ids
    ]
    groups = [
        {"params": student.trainable_parameters(), "weight_decay": config.weight_decay},
        {"params": other_head, "weight_decay": config.weight_decay},
        {"params": w2, "weight_decay": 0.0, "is_zero_init_w2": True},
    ]
    return torch.optim.AdamW(groups, lr=config.base_lr)


def vocab_digest(vocab) -> str:
    blob = json.dumps({"names": vocab.names, "template": vocab.template},
                      sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _arch_digest(student: DualEncoder, heads: HeadPair, config: TrainConfig) -> str:
    return ckpt.config_digest({
        "encoder": student.config.to_dict(),
        "variant": config.distill_variant,
        "param_names": sorted(n for n, _ in student.named_parameters()),
    })


def checkpoint_arrays(student: DualEncoder, heads: HeadPair) -> dict[str, np.ndarray]:
    arrays = ckpt.state_dict_arrays(student, prefix="student.")
    arrays.update(heads_arrays(heads))
    return arrays


def load_into(student: DualEncoder, heads: HeadPair | None, path) -> dict:
    arrays, meta = ckpt.load_checkpoint(path)
    ckpt.apply_arrays(student, arrays, prefix="student.")
    if heads is not None:
        apply_heads_arrays(heads, arrays)
    return meta


def train_run(
    student: DualEncoder,
    teacher: DualEncoder | None,
    heads: HeadPair,
    dataset: VideoDataset,
    config: TrainConfig,
    out_dir,
    tokenizer: Tokenizer | None = None,
    resume: bool = False,
) -> list[CheckpointMeta]:
    """Run the full schedule, writing one checkpoint per epoch plus a final
    copy and a line-delimited loss log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if tokenizer is None:
        tokenizer = Tokenizer.from_vocabulary(dataset.vocab)
    classes = training_classes(dataset)
    if not classes:
        raise TrainingError("training dataset has no labeled entries")
    if teacher is not None:
        for p in teacher.parameters():
            if p.requires_grad:
                raise TrainingError("teacher must be frozen")

    n = len(dataset.entries)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.total_epochs
    warmup_steps = steps_per_epoch * config.warmup_epochs
    optimizer = build_optimizer(student, heads, config)
    digest = _arch_digest(student, heads, config)

    start_epoch, global_step = 0, 0
    if resume:
        done = sorted(out.glob("epoch_*.npz"))
        if done:
            last = done[-1]
            meta = load_into(student, heads, last)
            state_path = out / (last.stem + ".state.pt")
            optimizer.load_state_dict(torch.load(state_path, weights_only=False))
            start_epoch = meta["epoch"] + 1
            global_step = meta["global_step"]
            log.info("resuming from %s (epoch %d)", last, meta["epoch"])

    metas: list[CheckpointMeta] = []
    log_mode = "a" if resume and start_epoch else "w"
    with open(out / "losses.jsonl", log_mode, encoding="utf-8") as loss_log:
        for epoch in range(start_epoch, config.total_epochs):
            if epoch >= 1:
                for group in optimizer.param_groups:
                    if group.get("is_zero_init_w2"):
                        group["weight_decay"] = config.weight_decay
            order = list(range(n))
            random.Random(f"{config.seed}/epoch/{epoch}").shuffle(order)
            epoch_records = []
            for b in range(steps_per_epoch):
                indices = order[b * config.batch_size:(b + 1) * config.batch_size]
                batch = build_batch(
                    dataset, indices, classes, tokenizer, config, epoch, global_step,
                    dtype=student.cls_dtype(),
                )
                lr = cosine_lr(global_step, total_steps, warmup_steps, config.base_lr)
                rec = train_step(student, teacher, heads, batch, config,
                                 optimizer, lr, step=global_step)
                loss_log.write(rec.to_json() + "\n")
                epoch_records.append(rec)
                global_step += 1
            loss_log.flush()

            metrics = {
                "ce": float(np.mean([r.ce for r in epoch_records])),
                "fd_vision": float(np.mean([r.fd_vision for r in epoch_records])),
                "fd_text": float(np.mean([r.fd_text for r in epoch_records])),
                "total": float(np.mean([r.total for r in epoch_records])),
            }
            meta = {
                "epoch": epoch,
                "global_step": global_step,
                "config_digest": digest,
                "vocab_digest": vocab_digest(dataset.vocab),
                "role": student.role,
                "metrics": metrics,
                "tokenizer_words": tokenizer.words,
                "encoder_config": student.config.to_dict(),
                "train_config": config.to_dict(),
            }
            path = out / f"epoch_{epoch:03d}.npz"
            ckpt.save_checkpoint(path, checkpoint_arrays(student, heads), meta)
            torch.save(optimizer.state_dict(), out / f"epoch_{epoch:03d}.state.pt")
            metas.append(CheckpointMeta(epoch, global_step, digest, metrics, str(path)))

    final_meta = dict(metas[-1].metrics) if metas else {}
    last_arrays = checkpoint_arrays(student, heads)
    meta = {
        "epoch": config.total_epochs - 1,
        "global_step": global_step,
        "config_digest": digest,
        "vocab_digest": vocab_digest(dataset.vocab),
        "role": student.role,
        "metrics": final_meta,
        "tokenizer_words": tokenizer.words,
        "encoder_config": student.config.to_dict(),
        "train_config": config.to_dict(),
    }
    ckpt.save_checkpoint(out / "final.npz", last_arrays, meta)
    return metas


def average_checkpoints(paths) -> tuple[dict[str, np.ndarray], dict]:
    """Parameter-wise arithmetic mean over checkpoints sharing one config
    digest (float64 accumulation, cast back to the stored dtype)."""
    paths = list(paths)
    if not paths:
        raise ValueError("no checkpoints to average")
    loaded = [ckpt.load_checkpoint(p) for p in paths]
    digests = {meta["config_digest"] for _, meta in loaded}
    if len(digests) != 1:
        raise ValueError(f"config digest mismatch across checkpoints: {sorted(digests)}")
    keys = set(loaded[0][0])
    for arrays, _ in loaded[1:]:
        if set(arrays) != keys:
            raise ValueError("checkpoints hold different tensor sets")
    averaged = {}
    for k in keys:
        stack = np.stack([a[k].astype(np.float64) for a, _ in loaded])
        averaged[k] = stack.mean(axis=0).astype(loaded[0][0][k].dtype)
    meta = dict(loaded[-1][1])
    meta["averaged_from"] = [str(p) for p in paths]
    return averaged, meta
