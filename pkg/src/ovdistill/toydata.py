"""Synthetic video dataset generator.

Each class is a combination of a static appearance (a mixture of sinusoidal
gratings) and a motion signature (a per-frame sub-patch translation).  Clips
add seeded per-clip noise, and all pixel data is a pure function of
(spec, class index, clip index), so frames can be regenerated on demand from
a ``toy:`` frame-source key without storing them.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .datasets import ClassVocabulary, ManifestEntry, VideoDataset, read_manifest, write_manifest

_FAMILY_WORDS = [
    "spin", "glide", "bounce", "fold", "sweep", "twist", "hop", "drift",
    "shake", "slide", "wave", "toss", "kick", "climb", "crawl", "leap",
    "stretch", "turn", "roll", "dash", "swing", "pull", "push", "flip",
]
_OBJECT_WORDS = [
    "ribbon", "ladder", "barrel", "kite", "rope", "wheel", "ball", "chair",
    "crate", "plank", "hoop", "cone", "flag", "stick", "drum", "bench",
    "tube", "block", "panel", "wire", "sled", "cart", "mat", "pole",
]


@dataclasses.dataclass(frozen=True)
class ToyDataSpec:
    num_classes: int = 20
    train_clips_per_class: int = 8
    test_clips_per_class: int = 4
    frames_per_clip: int = 16
    image_size: int = 32
    appearance_strength: float = 0.8
    motion_strength: float = 1.0
    name_group_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if min(self.train_clips_per_class, self.test_clips_per_class) < 0:
            raise ValueError("clip counts must be >= 0")
        if self.frames_per_clip < 1:
            raise ValueError("frames_per_clip must be >= 1")
        if not 0.0 <= self.appearance_strength <= 1.0:
            raise ValueError("appearance_strength must be in [0, 1]")
        if self.name_group_size < 1:
            raise ValueError("name_group_size must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def class_names(spec: ToyDataSpec) -> list[str]:
    """Two-word synthetic action names; name_group_size > 1 makes groups of
    classes share their first word, raising inter-class text similarity."""
    if spec.num_classes > len(_FAMILY_WORDS) * len(_OBJECT_WORDS):
        raise ValueError("too many classes for the name pools")
    names = []
    for i in range(spec.num_classes):
        family = _FAMILY_WORDS[(i // spec.name_group_size) % len(_FAMILY_WORDS)]
        obj = _OBJECT_WORDS[i % len(_OBJECT_WORDS)]
        names.append(f"{family} {obj}")
    return names


def _class_pattern(spec: ToyDataSpec, class_idx: int) -> np.ndarray:
    """Static 3 x H x W appearance for one class: two gratings per channel."""
    rng = np.random.default_rng([spec.seed, 7, class_idx])
    s = spec.image_size
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    channels = []
    for _ in range(3):
        img = np.zeros((s, s))
        for _ in range(2):
            kx, ky = rng.integers(1, 5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            img += np.sin(2 * np.pi * (kx * xx + ky * yy) / s + phase)
        channels.append(img)
    pattern = np.stack(channels)
    pattern = (pattern - pattern.min()) / (np.ptp(pattern) + 1e-12)
    return pattern


def _class_velocity(spec: ToyDataSpec, class_idx: int) -> tuple[int, int]:
    rng = np.random.default_rng([spec.seed, 11, class_idx])
    while True:
        vx, vy = int(rng.integers(-3, 4)), int(rng.integers(-3, 4))
        if (vx, vy) != (0, 0):
            return vx, vy


def clip_frames(spec: ToyDataSpec, class_idx: int, clip_idx: int) -> np.ndarray:
    """Deterministic frames_per_clip x 3 x H x W float32 array in [0, 1]."""
    pattern = _class_pattern(spec, class_idx)
    rng = np.random.default_rng([spec.seed, 13, class_idx, clip_idx])
    noise = rng.uniform(0.0, 1.0, size=pattern.shape)
    base = spec.appearance_strength * pattern + (1 - spec.appearance_strength) * noise
    vx, vy = _class_velocity(spec, class_idx)
    frames = []
    for t in range(spec.frames_per_clip):
        dy = round(t * vy * spec.motion_strength)
        dx = round(t * vx * spec.motion_strength)
        frames.append(np.roll(base, shift=(dy, dx), axis=(1, 2)))
    return np.stack(frames).astype(np.float32)


def _frame_source(class_idx: int, clip_idx: int) -> str:
    return f"toy:{class_idx}:{clip_idx}"


def _make_entries(spec: ToyDataSpec, names: list[str], first_clip: int, count: int, tag: str) -> list[ManifestEntry]:
    entries = []
    for ci, name in enumerate(names):
        for k in range(first_clip, first_clip + count):
            entries.append(ManifestEntry(
                clip_id=f"{tag}-c{ci:03d}-k{k:03d}",
                frame_source=_frame_source(ci, k),
                num_frames=spec.frames_per_clip,
                label=name,
            ))
    return entries


@dataclasses.dataclass
class ToyDataset:
    spec: ToyDataSpec
    train: VideoDataset
    test: VideoDataset

    @property
    def vocab(self) -> ClassVocabulary:
        return self.train.vocab

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "toyspec.json").write_text(
            json.dumps(self.spec.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
        )
        self.vocab.save(out / "vocab.json")
        write_manifest(self.train.entries, out / "train.jsonl")
        write_manifest(self.test.entries, out / "test.jsonl")


def make_frame_loader(spec: ToyDataSpec):
    def load(entry: ManifestEntry) -> np.ndarray:
        src = entry.frame_source
        if src.startswith("toy:"):
            _, ci, k = src.split(":")
            return clip_frames(spec, int(ci), int(k))
        if src.endswith(".npy"):
            return np.load(src)
        raise ValueError(f"unsupported frame source {src!r}")

    return load


def generate_toy_dataset(spec: ToyDataSpec) -> ToyDataset:
    names = class_names(spec)
    vocab = ClassVocabulary(names)
    loader = make_frame_loader(spec)
    train_entries = _make_entries(spec, names, 0, spec.train_clips_per_class, "train")
    test_entries = _make_entries(
        spec, names, spec.train_clips_per_class, spec.test_clips_per_class, "test"
    )
    return ToyDataset(
        spec,
        VideoDataset(train_entries, vocab, loader),
        VideoDataset(test_entries, vocab, loader),
    )


def load_toy_dataset(data_dir) -> ToyDataset:
    data = Path(data_dir)
    spec = ToyDataSpec(**json.loads((data / "toyspec.json").read_text(encoding="utf-8")))
    vocab = ClassVocabulary.load(data / "vocab.json")
    loader = make_frame_loader(spec)
    return ToyDataset(
        spec,
        VideoDataset(read_manifest(data / "train.jsonl"), vocab, loader),
        VideoDataset(read_manifest(data / "test.jsonl"), vocab, loader),
    )
