"""Dataset manifests, frame sampling, vocabulary management, and the
description-provider cache.

Manifests and description caches are line-delimited JSON (UTF-8); the
vocabulary is one JSON document.  All sampling here is a pure function of
its inputs and a seed.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import logging
import math
import random
import re
import string
import warnings
from pathlib import Path
from typing import Callable, Iterable, Protocol

log = logging.getLogger(__name__)

DESCRIPTION_INSTRUCTION = "Please describe this action in the video []"


# ---------------------------------------------------------------------------
# Manifests


@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    frame_source: str
    num_frames: int
    label: str

    def __post_init__(self):
        if self.num_frames < 1:
            raise ValueError(f"clip {self.clip_id!r}: num_frames must be >= 1")


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(dataclasses.asdict(e), sort_keys=True) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                entries.append(ManifestEntry(**json.loads(line)))
    return entries


# ---------------------------------------------------------------------------
# Vocabulary


@dataclasses.dataclass
class ClassVocabulary:
    names: list[str]
    template: str = "A video of []"
    descriptions: dict[str, list[str]] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if self.template.count("[]") != 1:
            raise ValueError("template must contain exactly one [] placeholder")

    def render(self, name: str) -> str:
        if name not in self.names:
            raise KeyError(f"unknown class {name!r}")
        return self.template.replace("[]", name)

    def save(self, path) -> None:
        doc = {
            "names": self.names,
            "template": self.template,
            "descriptions": self.descriptions,
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ClassVocabulary":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(doc["names"], doc.get("template", "A video of []"),
                   doc.get("descriptions", {}))


def render_prompts(vocab: ClassVocabulary, class_name: str, mode: str, seed=0) -> list[str]:
    """Eval mode: just the templated class name.  Train mode: the templated
    name plus one seeded-random description when any exist."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown prompt mode {mode!r}")
    templated = vocab.render(class_name)
    if mode == "eval":
        return [templated]
    descs = vocab.descriptions.get(class_name) or []
    if not descs:
        return [templated]
    rng = random.Random(f"{seed}/{class_name}")
    return [templated, rng.choice(descs)]


class Tokenizer:
    """Lowercase word tokenizer over a fixed vocabulary."""

    _WORD = re.compile(r"[a-z0-9]+")

    def __init__(self, words: Iterable[str]):
        self.words = list(words)
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        ids = []
        for w in self._WORD.findall(text.lower()):
            if w not in self._ids:
                raise KeyError(f"word {w!r} not in tokenizer vocabulary")
            ids.append(self._ids[w])
        return ids

    @classmethod
    def from_vocabulary(cls, vocab: ClassVocabulary, extra_texts: Iterable[str] = ()) -> "Tokenizer":
        words = set()
        texts = [vocab.template.replace("[]", " ")] + list(vocab.names)
        for descs in vocab.descriptions.values():
            texts.extend(descs)
        texts.extend(extra_texts)
        for t in texts:
            words.update(cls._WORD.findall(t.lower()))
        return cls(sorted(words))


# ---------------------------------------------------------------------------
# Splits and sampling


@dataclasses.dataclass(frozen=True)
class VocabSplit:
    base: frozenset[str]
    novel: frozenset[str]
    seed: int

    def __post_init__(self):
        if self.base & self.novel:
            raise ValueError("base and novel sets must be disjoint")

    def to_dict(self) -> dict:
        return {"base": sorted(self.base), "novel": sorted(self.novel), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "VocabSplit":
        return cls(frozenset(d["base"]), frozenset(d["novel"]), d["seed"])


def make_base_novel_split(vocab: ClassVocabulary, class_counts: dict[str, int], seed: int = 0) -> VocabSplit:
    """Rank classes by descending sample count (ties lexicographic) and put
    the top half in the base set.  A nonzero seed reshuffles only within
    tie groups, giving alternative base sets of the same frequency profile."""
    missing = set(vocab.names) - set(class_counts)
    if missing:
        raise ValueError(f"counts missing for classes: {sorted(missing)}")
    if len(vocab.names) < 2:
        raise ValueError("need at least 2 classes to split")
    groups: dict[int, list[str]] = {}
    for name in vocab.names:
        groups.setdefault(class_counts[name], []).append(name)
    ordered = []
    for count in sorted(groups, reverse=True):
        group = sorted(groups[count])
        if seed:
            random.Random(f"{seed}/{count}").shuffle(group)
        ordered.extend(group)
    n_base = (len(ordered) + 1) // 2
    return VocabSplit(frozenset(ordered[:n_base]), frozenset(ordered[n_base:]), seed)


def sample_frames(num_frames: int, n: int, mode: str, clip_index: int = 0, seed=0) -> list[int]:
    """Divide [0, num_frames) into n equal segments and pick one index each.

    Train mode picks a seeded-uniform index per segment; eval mode picks a
    deterministic in-segment position: clip_index 0 is the segment center
    and further clip indices walk the binary midpoint sequence
    (1/2, 1/4, 3/4, 1/8, ...), realizing distinct multi-clip views.
    Shorter videos repeat indices deterministically.
    """
    if n <= 0:
        raise ValueError("frame count n must be positive")
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    seg = num_frames / n
    if mode == "train":
        rng = random.Random(f"{seed}/{clip_index}")
        out = []
        for i in range(n):
            lo = int(i * seg)
            hi = min(max(lo, math.ceil((i + 1) * seg) - 1), num_frames - 1)
            out.append(rng.randint(lo, hi))
        return out
    frac = _midpoint_fraction(clip_index)
    return [
        min(int((i + frac) * seg), num_frames - 1)
        for i in range(n)
    ]


def _midpoint_fraction(clip_index: int) -> float:
    """0 -> 1/2, 1 -> 1/4, 2 -> 3/4, 3 -> 1/8, 4 -> 3/8, ..."""
    if clip_index < 0:
        raise ValueError("clip index must be >= 0")
    if clip_index == 0:
        return 0.5
    level, first = 4, 1
    k = clip_index - 1
    while k >= level // 2:
        k -= level // 2
        level *= 2
    return (2 * k + 1) / level


def sample_few_shot(manifest: list[ManifestEntry], base_classes: Iterable[str], k: int, seed: int = 0) -> list[ManifestEntry]:
    """Uniformly sample up to k clips per base class, without replacement."""
    if k < 1:
        raise ValueError("k must be >= 1")
    by_label: dict[str, list[ManifestEntry]] = {}
    for e in manifest:
        by_label.setdefault(e.label, []).append(e)
    out = []
    for cls in sorted(set(base_classes)):
        pool = sorted(by_label.get(cls, []), key=lambda e: e.clip_id)
        if not pool:
            log.warning("few-shot sampling: class %r has no clips, skipping", cls)
            continue
        rng = random.Random(f"{seed}/{cls}")
        out.extend(rng.sample(pool, min(k, len(pool))))
    return out


# ---------------------------------------------------------------------------
# Cross-dataset vocabulary filtering


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_class_name(name: str) -> str:
    return " ".join(name.lower().translate(_PUNCT_TABLE).split())


def cross_dataset_vocabulary(
    target_vocab: ClassVocabulary,
    source_vocab: ClassVocabulary,
    matcher: Callable[[str], str] = normalize_class_name,
) -> ClassVocabulary:
    """Target classes whose normalized names do not occur in the source
    vocabulary."""
    if not target_vocab.names or not source_vocab.names:
        raise ValueError("both vocabularies must be nonempty")
    source_keys = {matcher(n) for n in source_vocab.names}
    kept = [n for n in target_vocab.names if matcher(n) not in source_keys]
    if not kept:
        warnings.warn("cross-dataset filtering removed every target class", stacklevel=2)
    return ClassVocabulary(
        kept,
        target_vocab.template,
        {n: list(target_vocab.descriptions.get(n, [])) for n in kept},
    )


# ---------------------------------------------------------------------------
# Description provider + cache


@dataclasses.dataclass
class DescriptionRecord:
    name: str
    provider_id: str
    timestamp: str
    descriptions: list[str]


class DescriptionProvider(Protocol):
    provider_id: str

    def describe(self, instruction: str, class_name: str) -> list[str]: ...


class CannedDescriptionProvider:
    """Deterministic offline stand-in for a live description service."""

    provider_id = "canned-v1"

    def describe(self, instruction: str, class_name: str) -> list[str]:
        return [
            f"The video shows the action of {class_name} performed step by step",
            f"A person is {class_name} in a short clip",
        ]


class DescriptionCache:
    """Append-only class-name -> descriptions store with provenance."""

    def __init__(self, records: dict[str, DescriptionRecord] | None = None):
        self._records = dict(records or {})

    def __contains__(self, name: str) -> bool:
        return name in self._records

    def get(self, name: str) -> list[str]:
        return list(self._records[name].descriptions)

    def records(self) -> list[DescriptionRecord]:
        return [self._records[k] for k in sorted(self._records)]

    def add(self, record: DescriptionRecord) -> None:
        if record.name in self._records:
            raise ValueError(f"cache already holds {record.name!r}")
        self._records[record.name] = record

    def as_descriptions(self) -> dict[str, list[str]]:
        return {name: list(r.descriptions) for name, r in self._records.items()}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records():
                f.write(json.dumps(dataclasses.asdict(r), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DescriptionCache":
        records = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    r = DescriptionRecord(**json.loads(line))
                    records[r.name] = r
        return cls(records)


def fetch_descriptions(
    provider: DescriptionProvider | None,
    class_names: Iterable[str],
    cache: DescriptionCache,
    offline: bool = True,
) -> DescriptionCache:
    """Ensure the cache covers every requested class.

    Offline mode never touches the provider; any miss is a hard error.
    Online mode fetches all misses first and merges only on full success,
    so a provider failure leaves the cache untouched.
    """
    names = list(class_names)
    missing = [n for n in names if n not in cache]
    if not missing:
        return cache
    if offline:
        raise LookupError(
            f"offline description cache is missing classes: {sorted(missing)}"
        )
    if provider is None:
        raise ValueError("online fetch requires a provider")
    fetched = []
    for name in missing:
        descs = provider.describe(DESCRIPTION_INSTRUCTION, name)
        fetched.append(DescriptionRecord(
            name=name,
            provider_id=provider.provider_id,
            timestamp=datetime.datetime.now(datetime.timezone.utc).isoformat(),
            descriptions=list(descs),
        ))
    for record in fetched:
        cache.add(record)
    return cache


# ---------------------------------------------------------------------------
# Dataset bundle


@dataclasses.dataclass
class VideoDataset:
    """A manifest plus its vocabulary and a frame loader returning
    num_frames x 3 x H x W float arrays in [0, 1]."""

    entries: list[ManifestEntry]
    vocab: ClassVocabulary
    load_frames: Callable[[ManifestEntry], "object"]

    def class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in self.vocab.names}
        for e in self.entries:
            counts[e.label] = counts.get(e.label, 0) + 1
        return counts

    def subset(self, class_names: Iterable[str]) -> "VideoDataset":
        keep = set(class_names)
        return VideoDataset(
            [e for e in self.entries if e.label in keep], self.vocab, self.load_frames
        )
