"""Shared fixtures: tiny encoder configs for unit tests and one session-scoped
synthetic benchmark (pretrained teacher + fine-tuned student variants) reused
by the evaluation-level tests."""

import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from ovdistill.datasets import Tokenizer, make_base_novel_split, sample_frames
from ovdistill.distillation import fd_loss
from ovdistill.encoders import (
    ROLE_TEACHER,
    EncoderConfig,
    build_toy_dual_encoder,
    student_from_teacher,
)
from ovdistill.evaluator import (
    EvalConfig,
    embed_class_texts,
    evaluate_base_to_novel,
    multiview_logits,
    top1_accuracy,
)
from ovdistill.toydata import ToyDataSpec, generate_toy_dataset
from ovdistill.trainer import TrainConfig, make_heads, train_run

torch.set_num_threads(4)

TINY = EncoderConfig(
    patch_size=8,
    embed_width=16,
    depth=1,
    heads=2,
    text_vocab_size=64,
    max_text_length=16,
    image_size=16,
    seed=0,
)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_teacher():
    return build_toy_dual_encoder(TINY, ROLE_TEACHER)


@pytest.fixture
def tiny_video():
    rng = np.random.default_rng(0)
    return torch.as_tensor(
        rng.uniform(0, 1, size=(4, 3, 16, 16)).astype(np.float32)
    )


@pytest.fixture
def small_toy():
    spec = ToyDataSpec(
        num_classes=4,
        train_clips_per_class=2,
        test_clips_per_class=1,
        frames_per_clip=8,
        image_size=16,
        appearance_strength=0.9,
        seed=3,
    )
    return generate_toy_dataset(spec)


def _clip_feats(model, dataset, entries):
    feats = []
    with torch.no_grad():
        for e in entries:
            video = torch.as_tensor(np.asarray(dataset.load_frames(e)))
            idx = sample_frames(video.shape[0], 8, "eval", clip_index=0)
            feats.append(model.encode_video_frames(video[idx]).mean(0))
    return torch.stack(feats)


def _base_train_acc(model, dataset, base_names, tokenizer):
    entries = [e for e in dataset.entries if e.label in base_names]
    text = embed_class_texts(model, dataset.vocab, base_names, tokenizer)
    rows = [
        multiview_logits(model, dataset.load_frames(e), 1, text, 10.0, 8).numpy()
        for e in entries
    ]
    labels = [base_names.index(e.label) for e in entries]
    return top1_accuracy(rows, labels)


@pytest.fixture(scope="session")
def toy_benchmark(tmp_path_factory):
    """20-class synthetic benchmark: a contrastively pretrained teacher plus
    base-class fine-tuned students (residual beta=2, beta=0, projector) over
    three seeds, with accuracy and feature-drift measurements for each."""
    t0 = time.monotonic()
    out = tmp_path_factory.mktemp("benchmark")
    spec = ToyDataSpec(
        num_classes=20,
        train_clips_per_class=8,
        test_clips_per_class=4,
        frames_per_clip=16,
        appearance_strength=0.9,
        seed=42,
    )
    ds = generate_toy_dataset(spec)
    enc = EncoderConfig(embed_width=64, depth=2, heads=4, seed=0)
    tok = Tokenizer.from_vocabulary(ds.vocab)

    teacher = build_toy_dual_encoder(enc, "student")
    teacher_cfg = TrainConfig(
        base_lr=1e-3, warmup_epochs=2, total_epochs=60, batch_size=16,
        frames_per_clip=8, alpha=0.1, beta=0.0, distill_variant="direct",
        logit_scale=10.0, seed=0,
    )
    train_run(teacher, None, make_heads("direct", 64, 0.1), ds.train,
              teacher_cfg, out / "teacher", tokenizer=tok)
    teacher.requires_grad_(False)
    teacher.role = ROLE_TEACHER

    split = make_base_novel_split(ds.vocab, ds.train.class_counts(), 0)
    base_names = [n for n in ds.vocab.names if n in split.base]
    novel_entries = [e for e in ds.test.entries if e.label in split.novel]
    eval_cfg = EvalConfig(views=3, frames_per_clip=8, logit_scale=10.0)

    teacher_report = evaluate_base_to_novel(teacher, ds.test, split, eval_cfg, tok)
    teacher_base_acc = _base_train_acc(teacher, ds.train, base_names, tok)
    teacher_novel_feats = _clip_feats(teacher, ds.test, novel_entries)

    base_train = ds.train.subset(split.base)
    runs = {}
    for variant, beta, tag in (
        ("residual", 2.0, "residual_b2"),
        ("residual", 0.0, "beta0"),
        ("projector", 2.0, "projector_b2"),
    ):
        for seed in range(3):
            student = student_from_teacher(teacher)
            torch.manual_seed(1000 + seed)
            heads = make_heads(variant, 64, 0.1)
            cfg = TrainConfig(
                base_lr=2e-4, warmup_epochs=1, total_epochs=8, batch_size=16,
                frames_per_clip=8, alpha=0.1, beta=beta, distill_variant=variant,
                logit_scale=10.0, seed=seed,
            )
            train_run(student, teacher, heads, base_train, cfg,
                      out / f"{tag}_s{seed}", tokenizer=tok)
            report = evaluate_base_to_novel(student, ds.test, split, eval_cfg, tok)
            drift = fd_loss(
                teacher_novel_feats, _clip_feats(student, ds.test, novel_entries)
            ).item()
            runs[(tag, seed)] = SimpleNamespace(
                student=student,
                report=report,
                base_train_acc=_base_train_acc(student, ds.train, base_names, tok),
                novel_drift=drift,
            )

    return SimpleNamespace(
        spec=spec,
        dataset=ds,
        tokenizer=tok,
        encoder_config=enc,
        split=split,
        eval_config=eval_cfg,
        teacher=teacher,
        teacher_report=teacher_report,
        teacher_base_train_acc=teacher_base_acc,
        runs=runs,
        elapsed_seconds=time.monotonic() - t0,
    )
