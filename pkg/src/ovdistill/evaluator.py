"""Multi-view inference, metrics, and the two evaluation protocols."""

from __future__ import annotations

import dataclasses
import json
import statistics
import warnings
from pathlib import Path

import numpy as np
import torch

from .datasets import (
    ClassVocabulary,
    Tokenizer,
    VideoDataset,
    cross_dataset_vocabulary,
    render_prompts,
    sample_frames,
    VocabSplit,
)
from .encoders import DualEncoder, pool_frames
from .objective import DEFAULT_LOGIT_SCALE, similarity_logits
from .trainer import vocab_digest


@dataclasses.dataclass
class EvalReport:
    protocol: str                    # "base-to-novel" | "cross-dataset"
    per_split: dict[str, float]      # split name -> top-1 accuracy
    aggregates: dict[str, float]
    vocab_digest: str

    def __post_init__(self):
        for v in list(self.per_split.values()) + list(self.aggregates.values()):
            if not -1e-9 <= v <= 100 + 1e-9:
                raise ValueError(f"accuracy {v} outside [0, 100]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def top1_accuracy(logit_rows, labels) -> float:
    """Percentage of rows whose argmax (first index on ties) is the label."""
    rows = np.asarray([np.asarray(r) for r in logit_rows])
    labels = np.asarray(labels)
    if len(rows) != len(labels):
        raise ValueError("logits and labels must align")
    if len(rows) == 0:
        raise ValueError("cannot score an empty set")
    preds = rows.argmax(axis=1)
    return float((preds == labels).mean() * 100.0)


def harmonic_mean(base_acc: float, novel_acc: float) -> float:
    """2ab / (a + b); defined as 0 (with a warning) when either input is
    not positive."""
    if base_acc <= 0 or novel_acc <= 0:
        warnings.warn("harmonic mean undefined for non-positive accuracy; returning 0",
                      stacklevel=2)
        return 0.0
    return 2.0 * base_acc * novel_acc / (base_acc + novel_acc)


def ensemble_logits(frozen_row, tuned_row):
    """Element-wise sum of the frozen and tuned model logits."""
    frozen_row = torch.as_tensor(frozen_row)
    tuned_row = torch.as_tensor(tuned_row)
    if frozen_row.shape != tuned_row.shape:
        raise ValueError(
            f"logit width mismatch: {tuple(frozen_row.shape)} vs {tuple(tuned_row.shape)}"
        )
    return frozen_row + tuned_row


def embed_class_texts(
    model: DualEncoder,
    vocab: ClassVocabulary,
    names,
    tokenizer: Tokenizer,
) -> torch.Tensor:
    """Eval-prompt text embeddings for the given classes (unnormalized)."""
    embs = []
    with torch.no_grad():
        for name in names:
            (prompt,) = render_prompts(vocab, name, "eval")
            embs.append(model.encode_text(tokenizer.encode(prompt)))
    return torch.stack(embs)


def multiview_logits(
    model: DualEncoder,
    video,
    views: int,
    text_embs: torch.Tensor,
    logit_scale: float = DEFAULT_LOGIT_SCALE,
    frames_per_clip: int = 8,
) -> torch.Tensor:
    """Mean of the per-clip logits rows over ``views`` eval-mode samplings."""
    if views < 1:
        raise ValueError("views must be >= 1")
    video = np.asarray(video)
    rows = []
    with torch.no_grad():
        for v in range(views):
            idx = sample_frames(video.shape[0], frames_per_clip, "eval", clip_index=v)
            clip = torch.as_tensor(video[idx], dtype=model.cls_dtype())
            emb = pool_frames(model.encode_video_frames(clip))
            rows.append(similarity_logits(emb[None], text_embs, logit_scale)[0])
    return torch.stack(rows).mean(dim=0)


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    views: int = 3
    frames_per_clip: int = 8
    logit_scale: float = DEFAULT_LOGIT_SCALE
    joint_vocab: bool = False   # classify base+novel samples over the union


def _score_entries(
    model: DualEncoder,
    dataset: VideoDataset,
    entries,
    names: list[str],
    tokenizer: Tokenizer,
    config: EvalConfig,
    ensemble_with: DualEncoder | None = None,
) -> float:
    label_of = {n: i for i, n in enumerate(names)}
    text_embs = embed_class_texts(model, dataset.vocab, names, tokenizer)
    frozen_embs = None
    if ensemble_with is not None:
        frozen_embs = embed_class_texts(ensemble_with, dataset.vocab, names, tokenizer)
    rows, labels = [], []
    for entry in entries:
        video = dataset.load_frames(entry)
        row = multiview_logits(model, video, config.views, text_embs,
                               config.logit_scale, config.frames_per_clip)
        if ensemble_with is not None:
            frozen_row = multiview_logits(ensemble_with, video, config.views,
                                          frozen_embs, config.logit_scale,
                                          config.frames_per_clip)
            row = ensemble_logits(frozen_row, row)
        rows.append(row.numpy())
        labels.append(label_of[entry.label])
    return top1_accuracy(rows, labels)


def evaluate_base_to_novel(
    model: DualEncoder,
    dataset: VideoDataset,
    split: VocabSplit,
    config: EvalConfig = EvalConfig(),
    tokenizer: Tokenizer | None = None,
    ensemble_with: DualEncoder | None = None,
    model_vocab_digest: str | None = None,
) -> EvalReport:
    """Top-1 on base- and novel-class test samples plus their harmonic mean.

    Base samples are classified over the base vocabulary and novel samples
    over the novel vocabulary (per-set convention); ``joint_vocab`` switches
    both to the union.
    """
    digest = vocab_digest(dataset.vocab)
    if model_vocab_digest is not None and model_vocab_digest != digest:
        raise ValueError(
            f"model vocabulary digest {model_vocab_digest} does not match "
            f"dataset vocabulary {digest}"
        )
    if tokenizer is None:
        tokenizer = Tokenizer.from_vocabulary(dataset.vocab)
    base_names = [n for n in dataset.vocab.names if n in split.base]
    novel_names = [n for n in dataset.vocab.names if n in split.novel]
    base_entries = [e for e in dataset.entries if e.label in split.base]
    novel_entries = [e for e in dataset.entries if e.label in split.novel]
    results = {}
    for tag, entries, names in (
        ("base", base_entries, base_names),
        ("novel", novel_entries, novel_names),
    ):
        vocab_names = base_names + novel_names if config.joint_vocab else names
        results[tag] = _score_entries(model, dataset, entries, vocab_names,
                                      tokenizer, config, ensemble_with)
    aggregates = {
        "base": results["base"],
        "novel": results["novel"],
        "hm": harmonic_mean(results["base"], results["novel"]),
    }
    return EvalReport("base-to-novel", results, aggregates, digest)


def aggregate_base_to_novel(reports) -> EvalReport:
    """Mean of base/novel accuracies across split seeds; HM recomputed from
    the aggregated columns."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    base = float(np.mean([r.aggregates["base"] for r in reports]))
    novel = float(np.mean([r.aggregates["novel"] for r in reports]))
    per_split = {}
    for i, r in enumerate(reports):
        per_split[f"seed{i}/base"] = r.aggregates["base"]
        per_split[f"seed{i}/novel"] = r.aggregates["novel"]
    return EvalReport(
        "base-to-novel",
        per_split,
        {"base": base, "novel": novel, "hm": harmonic_mean(base, novel)},
        reports[0].vocab_digest,
    )


def evaluate_cross_dataset(
    model: DualEncoder,
    source_vocab: ClassVocabulary,
    target_dataset: VideoDataset,
    split_entry_lists,
    config: EvalConfig = EvalConfig(),
    tokenizer: Tokenizer | None = None,
    exclude_overlap: bool = True,
    ensemble_with: DualEncoder | None = None,
) -> EvalReport:
    """Multi-view top-1 per validation split on the (optionally
    source-filtered) target vocabulary; mean and population standard
    deviation across splits."""
    vocab = target_dataset.vocab
    if exclude_overlap:
        vocab = cross_dataset_vocabulary(vocab, source_vocab)
    if not vocab.names:
        raise ValueError("cross-dataset vocabulary is empty after exclusion")
    if tokenizer is None:
        tokenizer = Tokenizer.from_vocabulary(vocab)
    filtered = VideoDataset(
        [e for e in target_dataset.entries if e.label in set(vocab.names)],
        vocab,
        target_dataset.load_frames,
    )
    per_split = {}
    for i, entries in enumerate(split_entry_lists):
        keep = [e for e in entries if e.label in set(vocab.names)]
        per_split[f"split{i}"] = _score_entries(
            model, filtered, keep, vocab.names, tokenizer, config, ensemble_with
        )
    values = list(per_split.values())
    if not values:
        raise ValueError("no validation splits supplied")
    aggregates = {
        "mean": float(np.mean(values)),
        "std": float(statistics.pstdev(values)) if len(values) > 1 else 0.0,
    }
    return EvalReport("cross-dataset", per_split, aggregates, vocab_digest(vocab))


def format_report(report: EvalReport) -> str:
    """Human-readable summary table."""
    lines = [f"protocol: {report.protocol}", f"vocab digest: {report.vocab_digest}"]
    lines.append("per split:")
    for k in sorted(report.per_split):
        lines.append(f"  {k:>16}: {report.per_split[k]:6.2f}")
    lines.append("aggregates:")
    for k in sorted(report.aggregates):
        lines.append(f"  {k:>16}: {report.aggregates[k]:6.2f}")
    return "\n".join(lines)
