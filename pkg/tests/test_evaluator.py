"""Metrics, multi-view inference, and the two evaluation protocols."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ovdistill.datasets import Tokenizer, make_base_novel_split
from ovdistill.encoders import ROLE_TEACHER, build_toy_dual_encoder, pool_frames
from ovdistill.evaluator import (
    EvalConfig,
    EvalReport,
    aggregate_base_to_novel,
    embed_class_texts,
    ensemble_logits,
    evaluate_base_to_novel,
    evaluate_cross_dataset,
    format_report,
    harmonic_mean,
    multiview_logits,
    top1_accuracy,
)
from ovdistill.objective import similarity_logits
from ovdistill.datasets import sample_frames
from ovdistill.trainer import vocab_digest

from conftest import TINY


# ---------------------------------------------------------------------------
# Metrics


def test_top1_examples():
    rows = [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]
    assert top1_accuracy(rows, [0, 1, 0]) == 100.0
    assert top1_accuracy(rows, [1, 0, 1]) == 0.0
    assert abs(top1_accuracy(rows, [0, 1, 1]) - 66.667) < 0.01


def test_top1_tie_breaks_to_first_index():
    assert top1_accuracy([[0.5, 0.5]], [0]) == 100.0
    assert top1_accuracy([[0.5, 0.5]], [1]) == 0.0


def test_top1_validation():
    with pytest.raises(ValueError):
        top1_accuracy([], [])
    with pytest.raises(ValueError):
        top1_accuracy([[1.0, 0.0]], [0, 1])


def test_harmonic_mean_reference_values():
    assert abs(harmonic_mean(77.8, 64.3) - 70.4) < 0.05
    assert abs(harmonic_mean(95.3, 80.0) - 87.0) < 0.05
    assert harmonic_mean(42.0, 42.0) == 42.0


def test_harmonic_mean_nonpositive():
    with pytest.warns(UserWarning):
        assert harmonic_mean(0.0, 50.0) == 0.0
    with pytest.warns(UserWarning):
        assert harmonic_mean(50.0, -1.0) == 0.0


@settings(max_examples=200, deadline=None)
@given(
    st.floats(min_value=0.01, max_value=100.0),
    st.floats(min_value=0.01, max_value=100.0),
)
def test_harmonic_mean_bounds(a, b):
    hm = harmonic_mean(a, b)
    assert min(a, b) - 1e-9 <= hm <= (a + b) / 2 + 1e-9


def test_ensemble_logits():
    assert torch.equal(
        ensemble_logits(torch.tensor([1.0, 2.0]), torch.zeros(2)),
        torch.tensor([1.0, 2.0]),
    )
    summed = ensemble_logits(torch.tensor([1.0, 2.0]), torch.tensor([3.0, 1.0]))
    assert torch.equal(summed, torch.tensor([4.0, 3.0]))
    assert summed.argmax().item() == 0  # the tuned row alone would pick class 1
    a, b = torch.randn(4), torch.randn(4)
    assert torch.equal(ensemble_logits(a, b), ensemble_logits(b, a))
    with pytest.raises(ValueError):
        ensemble_logits(torch.zeros(3), torch.zeros(4))


# ---------------------------------------------------------------------------
# Multi-view inference


def test_multiview_single_view_matches_direct(small_toy):
    model = build_toy_dual_encoder(TINY, ROLE_TEACHER)
    tok = Tokenizer.from_vocabulary(small_toy.vocab)
    text = embed_class_texts(model, small_toy.vocab, small_toy.vocab.names, tok)
    video = small_toy.test.load_frames(small_toy.test.entries[0])
    row = multiview_logits(model, video, 1, text, 10.0, frames_per_clip=4)

    idx = sample_frames(np.asarray(video).shape[0], 4, "eval", clip_index=0)
    clip = torch.as_tensor(np.asarray(video)[idx])
    emb = pool_frames(model.encode_video_frames(clip))
    expected = similarity_logits(emb[None], text, 10.0)[0]
    assert torch.equal(row, expected)


def test_multiview_is_exact_mean_of_views(small_toy):
    model = build_toy_dual_encoder(TINY, ROLE_TEACHER)
    tok = Tokenizer.from_vocabulary(small_toy.vocab)
    text = embed_class_texts(model, small_toy.vocab, small_toy.vocab.names, tok)
    video = small_toy.test.load_frames(small_toy.test.entries[1])
    combined = multiview_logits(model, video, 3, text, 10.0, frames_per_clip=4)
    rows = []
    for v in range(3):
        idx = sample_frames(np.asarray(video).shape[0], 4, "eval", clip_index=v)
        clip = torch.as_tensor(np.asarray(video)[idx])
        emb = pool_frames(model.encode_video_frames(clip))
        rows.append(similarity_logits(emb[None], text, 10.0)[0])
    assert torch.equal(combined, torch.stack(rows).mean(dim=0))
    with pytest.raises(ValueError):
        multiview_logits(model, video, 0, text)


def test_multiview_static_video_views_agree(small_toy):
    model = build_toy_dual_encoder(TINY, ROLE_TEACHER)
    tok = Tokenizer.from_vocabulary(small_toy.vocab)
    text = embed_class_texts(model, small_toy.vocab, small_toy.vocab.names, tok)
    video = np.repeat(
        np.asarray(small_toy.test.load_frames(small_toy.test.entries[0]))[:1],
        8, axis=0,
    )
    one = multiview_logits(model, video, 1, text, 10.0, frames_per_clip=4)
    three = multiview_logits(model, video, 3, text, 10.0, frames_per_clip=4)
    assert torch.allclose(one, three, atol=1e-6)


# ---------------------------------------------------------------------------
# Protocols


def _split(ds):
    return make_base_novel_split(ds.vocab, ds.train.class_counts(), 0)


def test_base_to_novel_report_shape(small_toy):
    model = build_toy_dual_encoder(TINY, ROLE_TEACHER)
    split = _split(small_toy)
    cfg = EvalConfig(views=2, frames_per_clip=4, logit_scale=10.0)
    report = evaluate_base_to_novel(model, small_toy.test, split, cfg)
    assert report.protocol == "base-to-novel"
    assert set(report.aggregates) == {"base", "novel", "hm"}
    base, novel = report.aggregates["base"], report.aggregates["novel"]
    if base > 0 and novel > 0:
        assert abs(report.aggregates["hm"] - harmonic_mean(base, novel)) < 0.05


def test_base_to_novel_digest_check(small_toy):
    model = build_toy_dual_encoder(TINY, ROLE_TEACHER)
    cfg = EvalConfig(views=1, frames_per_clip=4, logit_scale=10.0)
    with pytest.raises(ValueError, match="digest"):
        evaluate_base_to_novel(model, small_toy.test, _split(small_toy), cfg,
                               model_vocab_digest="deadbeef00000000")
    # the matching digest passes
    evaluate_base_to_novel(model, small_toy.test, _split(small_toy), cfg,
                           model_vocab_digest=vocab_digest(small_toy.vocab))


def test_base_to_novel_joint_vocab_runs(small_toy):
    model = build_toy_dual_encoder(TINY, ROLE_TEACHER)
    cfg = EvalConfig(views=1, frames_per_clip=4, logit_scale=10.0, joint_vocab=True)
    report = evaluate_base_to_novel(model, small_toy.test, _split(small_toy), cfg)
    assert 0 <= report.aggregates["base"] <= 100


def test_aggregate_base_to_novel():
    digest = "0" * 16
    reports = [
        EvalReport("base-to-novel", {}, {"base": 80.0, "novel": 60.0, "hm": 68.57}, digest),
        EvalReport("base-to-novel", {}, {"base": 90.0, "novel": 70.0, "hm": 78.75}, digest),
    ]
    agg = aggregate_base_to_novel(reports)
    assert agg.aggregates["base"] == 85.0
    assert agg.aggregates["novel"] == 65.0
    assert abs(agg.aggregates["hm"] - harmonic_mean(85.0, 65.0)) < 1e-9
    with pytest.raises(ValueError):
        aggregate_base_to_novel([])


def test_cross_dataset_identical_splits(small_toy):
    model = build_toy_dual_encoder(TINY, ROLE_TEACHER)
    cfg = EvalConfig(views=1, frames_per_clip=4, logit_scale=10.0)
    entries = small_toy.test.entries
    report = evaluate_cross_dataset(
        model, small_toy.vocab, small_toy.test, [entries, entries, entries],
        cfg, exclude_overlap=False,
    )
    assert report.aggregates["std"] == 0.0
    assert report.aggregates["mean"] == list(report.per_split.values())[0]
    single = evaluate_cross_dataset(
        model, small_toy.vocab, small_toy.test, [entries], cfg,
        exclude_overlap=False,
    )
    assert single.aggregates["std"] == 0.0


def test_cross_dataset_full_overlap_errors(small_toy):
    model = build_toy_dual_encoder(TINY, ROLE_TEACHER)
    with pytest.warns(UserWarning):
        with pytest.raises(ValueError, match="empty"):
            evaluate_cross_dataset(
                model, small_toy.vocab, small_toy.test,
                [small_toy.test.entries],
                EvalConfig(views=1, frames_per_clip=4),
                exclude_overlap=True,
            )


# ---------------------------------------------------------------------------
# Reports


def test_report_serialization(tmp_path):
    report = EvalReport("base-to-novel", {"s0": 50.0}, {"base": 50.0}, "0" * 16)
    report.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json") == report
    with pytest.raises(ValueError):
        EvalReport("base-to-novel", {"s0": 101.0}, {}, "0" * 16)


def test_format_report_mentions_aggregates():
    report = EvalReport("cross-dataset", {"split0": 75.0}, {"mean": 75.0, "std": 0.0}, "0" * 16)
    text = format_report(report)
    assert "cross-dataset" in text
    assert "split0" in text
    assert "mean" in text
