"""Semantic distance between class vocabularies and attention heatmaps."""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .datasets import ClassVocabulary, Tokenizer, render_prompts
from .encoders import DualEncoder
from .trainer import vocab_digest

MODE_SYMMETRIC = "symmetric"
MODE_AVERAGE = "average"


@dataclasses.dataclass
class VocabularyEmbedding:
    names: list[str]
    vectors: np.ndarray          # K x C, unit rows
    encoder_digest: str

    def __post_init__(self):
        if len(self.names) != len(self.vectors):
            raise ValueError("one vector per class name required")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        norms = np.linalg.norm(self.vectors, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("vectors must be unit-normalized")


def embed_vocabulary(
    model: DualEncoder,
    vocab: ClassVocabulary,
    tokenizer: Tokenizer | None = None,
    use_template: bool = True,
) -> VocabularyEmbedding:
    """Embed each class via its eval prompt (or the bare name) with the
    given frozen text encoder; rows unit-normalized."""
    if tokenizer is None:
        tokenizer = Tokenizer.from_vocabulary(vocab)
    rows = []
    with torch.no_grad():
        for name in vocab.names:
            text = render_prompts(vocab, name, "eval")[0] if use_template else name
            v = model.encode_text(tokenizer.encode(text)).double().numpy()
            rows.append(v / np.linalg.norm(v))
    return VocabularyEmbedding(list(vocab.names), np.stack(rows),
                               vocab_digest(vocab))


def hausdorff_similarity(
    a: VocabularyEmbedding | np.ndarray,
    b: VocabularyEmbedding | np.ndarray,
    mode: str = MODE_SYMMETRIC,
) -> float:
    """Set-to-set cosine similarity in [-1, 1].

    The directed score matches each class of one set with its most similar
    class in the other and keeps the worst such match (symmetric mode) or
    their mean (average mode); the two directions are combined with min,
    mirroring the max-aggregation of the classical Hausdorff distance.
    """
    av = a.vectors if isinstance(a, VocabularyEmbedding) else np.asarray(a)
    bv = b.vectors if isinstance(b, VocabularyEmbedding) else np.asarray(b)
    if len(av) == 0 or len(bv) == 0:
        raise ValueError("vocabulary embeddings must be nonempty")
    # pairwise dots rather than one matrix product: the result is then
    # reproducible by any per-pair cosine computation, independent of BLAS
    # blocking (vocabularies are small, so the loop costs nothing)
    sims = np.array([[np.dot(x, y) for y in bv] for x in av])
    best_ab = sims.max(axis=1)   # per class of A: closest match in B
    best_ba = sims.max(axis=0)
    if mode == MODE_SYMMETRIC:
        return float(min(best_ab.min(), best_ba.min()))
    if mode == MODE_AVERAGE:
        return float(min(best_ab.mean(), best_ba.mean()))
    raise ValueError(f"unknown mode {mode!r}")


def semantic_distance_report(
    train_vocab: ClassVocabulary,
    test_vocabs: dict[str, ClassVocabulary],
    text_encoder: DualEncoder,
    tokenizer: Tokenizer | None = None,
    mode: str = MODE_SYMMETRIC,
    use_template: bool = True,
) -> list[tuple[str, float]]:
    """Similarity of every test vocabulary to the training vocabulary,
    sorted descending."""
    if not train_vocab.names or any(not v.names for v in test_vocabs.values()):
        raise ValueError("all vocabularies must be nonempty")
    if tokenizer is None:
        words = set()
        for v in [train_vocab, *test_vocabs.values()]:
            words.update(Tokenizer.from_vocabulary(v).words)
        tokenizer = Tokenizer(sorted(words))
    train_emb = embed_vocabulary(text_encoder, train_vocab, tokenizer, use_template)
    scored = []
    for name, vocab in test_vocabs.items():
        emb = embed_vocabulary(text_encoder, vocab, tokenizer, use_template)
        scored.append((name, hausdorff_similarity(train_emb, emb, mode)))
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return scored


# ---------------------------------------------------------------------------
# Attention heatmaps


def _upsample_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(grid.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.BILINEAR))


def attention_heatmaps(model: DualEncoder, video, out_dir) -> list[Path]:
    """Write one overlay image and one raw-weight text file per frame.

    Raw weights are the patch-grid attention of the global token
    (last layer, head-averaged), serialized losslessly as float64 text.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    video = np.asarray(video, dtype=np.float32)
    weights = model.cls_attention(torch.as_tensor(video, dtype=model.cls_dtype()))
    t, p = weights.shape
    g = int(math.isqrt(p))
    if g * g != p:
        raise ValueError(f"patch count {p} is not a square grid")
    written = []
    for i in range(t):
        grid = weights[i].reshape(g, g).double().numpy()
        raw_path = out / f"frame_{i:03d}.txt"
        np.savetxt(raw_path, grid, fmt="%.17g")
        heat = _upsample_bilinear(grid, video.shape[-1])
        lo, hi = heat.min(), heat.max()
        heat = (heat - lo) / (hi - lo) if hi > lo else np.full_like(heat, 0.5)
        frame = np.clip(video[i].transpose(1, 2, 0), 0.0, 1.0)
        overlay = 0.5 * frame
        overlay[..., 0] += 0.5 * heat  # red channel carries the attention mass
        img_path = out / f"frame_{i:03d}.png"
        Image.fromarray((np.clip(overlay, 0, 1) * 255).astype(np.uint8)).save(img_path)
        written.append(img_path)
    return written


def load_heatmap(path) -> np.ndarray:
    """Inverse of the raw-weight serialization in attention_heatmaps."""
    return np.atleast_2d(np.loadtxt(path, dtype=np.float64))
