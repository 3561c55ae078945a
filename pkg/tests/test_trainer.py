"""Training loop: schedule, batches, steps, checkpoints, resume, and
cross-epoch weight averaging."""

import json
import math
import shutil

import numpy as np
import pytest
import torch

from ovdistill import checkpoint as ckpt
from ovdistill.datasets import Tokenizer
from ovdistill.distillation import ProjectorHead, ResidualHead
from ovdistill.encoders import ROLE_TEACHER, build_toy_dual_encoder, student_from_teacher
from ovdistill.trainer import (
    Batch,
    HeadPair,
    TrainConfig,
    apply_heads_arrays,
    average_checkpoints,
    build_batch,
    build_optimizer,
    checkpoint_arrays,
    cosine_lr,
    heads_arrays,
    make_heads,
    train_run,
    train_step,
    training_classes,
)

from conftest import TINY


def _cfg(**kw):
    defaults = dict(
        base_lr=1e-3, warmup_epochs=1, total_epochs=3, batch_size=4,
        frames_per_clip=4, alpha=0.1, beta=2.0, distill_variant="residual",
        logit_scale=10.0, seed=0,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def _batch(dataset, config, indices=(0, 1, 2, 3)):
    tok = Tokenizer.from_vocabulary(dataset.vocab)
    classes = training_classes(dataset)
    return build_batch(dataset, list(indices), classes, tok, config, 0, 0)


# ---------------------------------------------------------------------------
# Schedule


def test_cosine_lr_endpoints():
    assert cosine_lr(10, 100, 10, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 10, 1e-3) < 1e-15
    assert abs(cosine_lr(55, 100, 10, 1e-3) - 5e-4) < 1e-12
    assert cosine_lr(0, 100, 10, 1e-3) == 0.0


def test_cosine_lr_validation():
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 10, 1e-3)
    with pytest.raises(ValueError):
        cosine_lr(-1, 100, 10, 1e-3)
    with pytest.raises(ValueError):
        cosine_lr(5, 100, 100, 1e-3)


def test_train_config_validation():
    with pytest.raises(ValueError):
        _cfg(warmup_epochs=3, total_epochs=3)
    with pytest.raises(ValueError):
        _cfg(batch_size=0)
    with pytest.raises(ValueError):
        _cfg(beta=-1.0)
    with pytest.raises(ValueError):
        _cfg(distill_variant="nearest")
    cfg = _cfg()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# Heads


def test_make_heads_variants():
    direct = make_heads("direct", 8, 0.1)
    assert direct.vision is None and direct.text is None
    projector = make_heads("projector", 8, 0.1)
    assert isinstance(projector.vision, ProjectorHead)
    residual = make_heads("residual", 8, 0.25)
    assert isinstance(residual.text, ResidualHead)
    assert residual.vision.alpha == 0.25
    with pytest.raises(ValueError):
        make_heads("identity", 8, 0.1)


def test_heads_arrays_roundtrip():
    heads = make_heads("residual", 8, 0.1)
    torch.nn.init.normal_(heads.vision.fc2.weight)
    arrays = heads_arrays(heads)
    assert set(arrays) == {
        "head.vision.W1", "head.vision.W2", "head.text.W1", "head.text.W2",
    }
    other = make_heads("residual", 8, 0.1)
    apply_heads_arrays(other, arrays)
    assert torch.equal(other.vision.fc2.weight, heads.vision.fc2.weight)
    with pytest.raises(KeyError):
        apply_heads_arrays(other, {"head.vision.W1": arrays["head.vision.W1"]})


# ---------------------------------------------------------------------------
# Batches and steps


def test_build_batch_is_deterministic(small_toy):
    cfg = _cfg()
    a = _batch(small_toy.train, cfg)
    b = _batch(small_toy.train, cfg)
    assert torch.equal(a.videos, b.videos)
    assert torch.equal(a.labels, b.labels)
    assert a.class_token_ids == b.class_token_ids
    assert a.videos.shape == (4, 4, 3, 16, 16)
    assert len(a.class_token_ids) == len(training_classes(small_toy.train))


def test_train_step_zero_fd_at_init(small_toy):
    teacher = build_toy_dual_encoder(TINY, ROLE_TEACHER)
    student = student_from_teacher(teacher)
    heads = make_heads("residual", TINY.embed_width, 0.1)
    cfg = _cfg()
    optimizer = build_optimizer(student, heads, cfg)
    rec = train_step(student, teacher, heads, _batch(small_toy.train, cfg),
                     cfg, optimizer, lr=1e-3)
    assert rec.fd_vision == 0.0
    assert rec.fd_text == 0.0
    assert rec.total == rec.ce


def test_teacher_is_immutable(small_toy):
    teacher = build_toy_dual_encoder(TINY, ROLE_TEACHER)
    before = {k: v.clone() for k, v in teacher.state_dict().items()}
    student = student_from_teacher(teacher)
    heads = make_heads("residual", TINY.embed_width, 0.1)
    cfg = _cfg()
    optimizer = build_optimizer(student, heads, cfg)
    batch = _batch(small_toy.train, cfg)
    for step in range(3):
        train_step(student, teacher, heads, batch, cfg, optimizer, 1e-3, step)
    for k, v in teacher.state_dict().items():
        assert torch.equal(v, before[k])


def test_beta_zero_matches_teacherless_run(small_toy):
    cfg_t = _cfg(beta=0.0, distill_variant="direct")
    teacher = build_toy_dual_encoder(TINY, ROLE_TEACHER)
    runs = []
    for use_teacher in (True, False):
        student = student_from_teacher(teacher)
        heads = make_heads("direct", TINY.embed_width, 0.1)
        optimizer = build_optimizer(student, heads, cfg_t)
        batch = _batch(small_toy.train, cfg_t)
        for step in range(3):
            train_step(student, teacher if use_teacher else None, heads,
                       batch, cfg_t, optimizer, 1e-3, step)
        runs.append(student.state_dict())
    for k in runs[0]:
        assert torch.equal(runs[0][k], runs[1][k])


def test_train_step_requires_teacher_for_distillation(small_toy):
    student = build_toy_dual_encoder(TINY, "student")
    heads = make_heads("residual", TINY.embed_width, 0.1)
    cfg = _cfg(beta=2.0)
    optimizer = build_optimizer(student, heads, cfg)
    with pytest.raises(ValueError):
        train_step(student, None, heads, _batch(small_toy.train, cfg),
                   cfg, optimizer, 1e-3)


def test_optimizer_w2_decay_exemption():
    student = build_toy_dual_encoder(TINY, "student")
    heads = make_heads("residual", TINY.embed_width, 0.1)
    cfg = _cfg(weight_decay=0.05)
    optimizer = build_optimizer(student, heads, cfg)
    w2_groups = [g for g in optimizer.param_groups if g.get("is_zero_init_w2")]
    assert len(w2_groups) == 1
    assert w2_groups[0]["weight_decay"] == 0.0
    assert len(w2_groups[0]["params"]) == 2
    others = [g for g in optimizer.param_groups if not g.get("is_zero_init_w2")]
    assert all(g["weight_decay"] == 0.05 for g in others)


# ---------------------------------------------------------------------------
# Full runs


def _run(tmp_path, dataset, name, cfg=None, epochs=3):
    cfg = cfg or _cfg(total_epochs=epochs)
    teacher = build_toy_dual_encoder(TINY, ROLE_TEACHER)
    student = student_from_teacher(teacher)
    torch.manual_seed(17)
    heads = make_heads(cfg.distill_variant, TINY.embed_width, cfg.alpha)
    out = tmp_path / name
    metas = train_run(student, teacher, heads, dataset, cfg, out)
    return out, metas


def test_train_run_artifacts(tmp_path, small_toy):
    out, metas = _run(tmp_path, small_toy.train, "run")
    assert len(metas) == 3
    assert sorted(p.name for p in out.glob("epoch_*.npz")) == [
        "epoch_000.npz", "epoch_001.npz", "epoch_002.npz",
    ]
    assert (out / "final.npz").is_file()
    lines = (out / "losses.jsonl").read_text().splitlines()
    assert len(lines) == 3 * math.ceil(len(small_toy.train.entries) / 4)
    first = json.loads(lines[0])
    assert first["fd_vision"] == 0.0 and first["fd_text"] == 0.0
    _, meta = ckpt.load_checkpoint(out / "final.npz")
    assert meta["role"] == "student"
    assert meta["encoder_config"] == TINY.to_dict()
    assert meta["train_config"]["beta"] == 2.0
    assert meta["tokenizer_words"]


def test_train_run_is_reproducible(tmp_path, small_toy):
    out_a, _ = _run(tmp_path, small_toy.train, "a")
    out_b, _ = _run(tmp_path, small_toy.train, "b")
    assert (out_a / "final.npz").read_bytes() == (out_b / "final.npz").read_bytes()
    assert (out_a / "losses.jsonl").read_text() == (out_b / "losses.jsonl").read_text()


def test_train_run_resume_matches_uninterrupted(tmp_path, small_toy):
    cfg = _cfg(total_epochs=4)
    out_full, _ = _run(tmp_path, small_toy.train, "full", cfg=cfg)

    partial = tmp_path / "partial"
    partial.mkdir()
    for stem in ("epoch_000", "epoch_001"):
        shutil.copy(out_full / f"{stem}.npz", partial / f"{stem}.npz")
        shutil.copy(out_full / f"{stem}.state.pt", partial / f"{stem}.state.pt")

    teacher = build_toy_dual_encoder(TINY, ROLE_TEACHER)
    student = student_from_teacher(teacher)
    torch.manual_seed(17)
    heads = make_heads(cfg.distill_variant, TINY.embed_width, cfg.alpha)
    train_run(student, teacher, heads, small_toy.train, cfg, partial, resume=True)

    full_arrays, _ = ckpt.load_checkpoint(out_full / "final.npz")
    resumed_arrays, _ = ckpt.load_checkpoint(partial / "final.npz")
    for k in full_arrays:
        assert np.array_equal(full_arrays[k], resumed_arrays[k]), k


def test_training_loss_decreases(tmp_path, small_toy):
    cfg = _cfg(beta=0.0, distill_variant="direct", total_epochs=20,
               warmup_epochs=2, base_lr=1e-3)
    student = build_toy_dual_encoder(TINY, "student")
    out = tmp_path / "pretrain"
    metas = train_run(student, None, make_heads("direct", TINY.embed_width, 0.1),
                      small_toy.train, cfg, out)
    assert metas[-1].metrics["ce"] < metas[0].metrics["ce"]


def test_train_run_rejects_empty_dataset(tmp_path, small_toy):
    empty = small_toy.train.subset([])
    student = build_toy_dual_encoder(TINY, "student")
    with pytest.raises(Exception, match="no labeled entries"):
        train_run(student, None, make_heads("direct", TINY.embed_width, 0.1),
                  empty, _cfg(beta=0.0, distill_variant="direct"), tmp_path / "x")


# ---------------------------------------------------------------------------
# Averaging


def test_average_checkpoints(tmp_path):
    meta = {"config_digest": "d1"}
    a = {"w": np.array([0.0, 2.0])}
    b = {"w": np.array([1.0, 4.0])}
    ckpt.save_checkpoint(tmp_path / "a.npz", a, meta)
    ckpt.save_checkpoint(tmp_path / "b.npz", b, meta)

    arrays, _ = average_checkpoints([tmp_path / "a.npz"])
    assert np.array_equal(arrays["w"], a["w"])

    arrays, _ = average_checkpoints([tmp_path / "a.npz", tmp_path / "a.npz"])
    assert np.array_equal(arrays["w"], a["w"])

    arrays, _ = average_checkpoints([tmp_path / "a.npz", tmp_path / "b.npz"])
    assert np.array_equal(arrays["w"], np.array([0.5, 3.0]))


def test_average_checkpoints_digest_mismatch(tmp_path):
    ckpt.save_checkpoint(tmp_path / "a.npz", {"w": np.zeros(2)}, {"config_digest": "d1"})
    ckpt.save_checkpoint(tmp_path / "b.npz", {"w": np.zeros(2)}, {"config_digest": "d2"})
    with pytest.raises(ValueError):
        average_checkpoints([tmp_path / "a.npz", tmp_path / "b.npz"])
    with pytest.raises(ValueError):
        average_checkpoints([])
