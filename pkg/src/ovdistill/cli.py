"""Command-line entry point.

Commands: train, eval, analyze, prepare, selftest.  Configuration is one
YAML document; ``--set section.key=value`` overrides individual fields
(flags > file > defaults).  Every command writes a resolved-config snapshot
next to its artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import checkpoint as ckpt
from .analysis import (
    MODE_SYMMETRIC,
    attention_heatmaps,
    semantic_distance_report,
)
from .datasets import (
    CannedDescriptionProvider,
    ClassVocabulary,
    DescriptionCache,
    Tokenizer,
    fetch_descriptions,
    make_base_novel_split,
    sample_few_shot,
    VideoDataset,
)
from .distillation import ResidualHead
from .encoders import (
    ROLE_STUDENT,
    ROLE_TEACHER,
    DualEncoder,
    EncoderConfig,
    build_toy_dual_encoder,
    student_from_teacher,
)
from .evaluator import (
    EvalConfig,
    aggregate_base_to_novel,
    evaluate_base_to_novel,
    evaluate_cross_dataset,
    format_report,
    harmonic_mean,
)
from .toydata import ToyDataSpec, generate_toy_dataset, load_toy_dataset
from .trainer import (
    TrainConfig,
    average_checkpoints,
    cosine_lr,
    make_heads,
    train_run,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_SELFTEST = 3

OUT_DIR_ENV = "OVDISTILL_OUT_DIR"


class ConfigError(ValueError):
    pass


_DATA_KEYS = {
    "data_dir", "out_dir", "teacher_checkpoint", "adapter_bottleneck",
    "cache_file",
}
_PROTOCOL_KEYS = {
    "name", "views", "frames_per_clip", "joint_vocab", "split_seed", "k_shot",
    "exclude_overlap", "num_splits", "source_data_dir", "split_file",
}
_EVAL_KEYS = {"checkpoints", "ensemble_with"}
_DESCRIPTION_KEYS = {"provider", "offline", "merge_into_vocab"}
_ANALYZE_KEYS = {"mode", "checkpoint", "clip_id", "test_vocabs", "hausdorff_mode",
                 "use_template"}

_SECTION_KEYS = {
    "encoder": {f.name for f in dataclasses.fields(EncoderConfig)},
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
    "toy": {f.name for f in dataclasses.fields(ToyDataSpec)},
    "data": _DATA_KEYS,
    "protocol": _PROTOCOL_KEYS,
    "eval": _EVAL_KEYS,
    "descriptions": _DESCRIPTION_KEYS,
    "analyze": _ANALYZE_KEYS,
}


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg: dict = {}
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = cfg
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} crosses a scalar")
        node[parts[-1]] = value
    validate_config(cfg)
    if env_out := os.environ.get(OUT_DIR_ENV):
        cfg.setdefault("data", {})["out_dir"] = env_out
    return cfg


def validate_config(cfg: dict) -> None:
    known_top = set(_SECTION_KEYS) | {"seed"}
    for key in cfg:
        if key not in known_top:
            raise ConfigError(f"unknown config section {key!r}")
    for section, allowed in _SECTION_KEYS.items():
        sub = cfg.get(section) or {}
        if not isinstance(sub, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        for key in sub:
            if key not in allowed:
                raise ConfigError(f"unknown key {section}.{key!r}")


def _require(cfg: dict, section: str, key: str):
    value = (cfg.get(section) or {}).get(key)
    if value is None:
        raise ConfigError(f"missing required config field {section}.{key}")
    return value


def write_snapshot(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.yaml").write_text(
        yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8"
    )


def _encoder_config(cfg: dict) -> EncoderConfig:
    fields = dict(cfg.get("encoder") or {})
    fields.setdefault("seed", cfg.get("seed", 0))
    try:
        return EncoderConfig(**fields)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"encoder config: {e}") from e


def _train_config(cfg: dict) -> TrainConfig:
    fields = dict(cfg.get("train") or {})
    fields.setdefault("seed", cfg.get("seed", 0))
    try:
        return TrainConfig(**fields)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train config: {e}") from e


def _load_dataset(cfg: dict):
    data_dir = _require(cfg, "data", "data_dir")
    if not Path(data_dir).is_dir():
        raise ConfigError(f"data.data_dir does not exist: {data_dir}")
    return load_toy_dataset(data_dir)


def _model_from_checkpoint(path, role: str = ROLE_STUDENT):
    arrays, meta = ckpt.load_checkpoint(path)
    return _model_from_arrays(arrays, meta, role)


def _model_from_arrays(arrays: dict, meta: dict, role: str) -> tuple[DualEncoder, Tokenizer, dict]:
    enc_cfg = EncoderConfig.from_dict(meta["encoder_config"])
    model = DualEncoder(enc_cfg, ROLE_STUDENT)
    ckpt.apply_arrays(model, arrays, prefix="student.")
    if role == ROLE_TEACHER:
        model.requires_grad_(False)
        model.role = ROLE_TEACHER
    tokenizer = Tokenizer(meta["tokenizer_words"])
    return model, tokenizer, meta


# ---------------------------------------------------------------------------
# Commands


def cmd_prepare(cfg: dict, mode: str) -> int:
    out_dir = Path(_require(cfg, "data", "data_dir"))
    if mode == "toy-data":
        toy = dict(cfg.get("toy") or {})
        toy.setdefault("seed", cfg.get("seed", 0))
        spec = ToyDataSpec(**toy)
        dataset = generate_toy_dataset(spec)
        dataset.save(out_dir)
        write_snapshot(cfg, out_dir)
        print(f"wrote toy dataset ({len(dataset.train.entries)} train / "
              f"{len(dataset.test.entries)} test clips) to {out_dir}")
        return EXIT_OK

    # descriptions
    dcfg = dict(cfg.get("descriptions") or {})
    offline = bool(dcfg.get("offline", True))
    cache_path = Path(_require(cfg, "data", "cache_file"))
    vocab = ClassVocabulary.load(out_dir / "vocab.json")
    cache = DescriptionCache.load(cache_path) if cache_path.is_file() else DescriptionCache()
    provider = None
    if not offline:
        name = dcfg.get("provider", "canned")
        if name != "canned":
            raise ConfigError(f"unknown description provider {name!r}")
        provider = CannedDescriptionProvider()
    fetch_descriptions(provider, vocab.names, cache, offline=offline)
    cache.save(cache_path)
    if dcfg.get("merge_into_vocab", True):
        vocab.descriptions = cache.as_descriptions()
        vocab.save(out_dir / "vocab.json")
    write_snapshot(cfg, cache_path.parent)
    print(f"description cache covers {len(cache.records())} classes -> {cache_path}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    dataset = _load_dataset(cfg)
    out_dir = Path(_require(cfg, "data", "out_dir"))
    enc_cfg = _encoder_config(cfg)
    train_cfg = _train_config(cfg)
    data_cfg = cfg.get("data") or {}
    proto = cfg.get("protocol") or {}

    teacher = None
    tokenizer = Tokenizer.from_vocabulary(dataset.vocab)
    if data_cfg.get("teacher_checkpoint"):
        teacher, tokenizer, _ = _model_from_checkpoint(
            data_cfg["teacher_checkpoint"], role=ROLE_TEACHER
        )
        # architecture comes from the teacher checkpoint, not the CLI encoder
        # section; only the student-side mixing flag is honored
        student = student_from_teacher(
            teacher,
            temporal_mixing=bool((cfg.get("encoder") or {}).get("temporal_mixing", False)),
            adapter_bottleneck=data_cfg.get("adapter_bottleneck"),
        )
        enc_cfg = student.config
    else:
        if train_cfg.beta != 0:
            raise ConfigError(
                "train.beta > 0 requires data.teacher_checkpoint (distillation "
                "needs a frozen teacher)"
            )
        student = build_toy_dual_encoder(enc_cfg, ROLE_STUDENT)

    train_set = dataset.train
    if proto.get("name") == "b2n":
        split = make_base_novel_split(
            dataset.vocab, dataset.train.class_counts(), proto.get("split_seed", 0)
        )
        few = sample_few_shot(
            [e for e in dataset.train.entries if e.label in split.base],
            split.base, proto.get("k_shot", 16), seed=train_cfg.seed,
        )
        train_set = VideoDataset(few, dataset.vocab, dataset.train.load_frames)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "split.json").write_text(
            json.dumps(split.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
        )

    torch.manual_seed(train_cfg.seed)
    heads = make_heads(train_cfg.distill_variant, enc_cfg.embed_width, train_cfg.alpha)
    write_snapshot(cfg, out_dir)
    metas = train_run(student, teacher, heads, train_set, train_cfg, out_dir,
                      tokenizer=tokenizer)
    last = metas[-1].metrics if metas else {}
    print(f"trained {len(metas)} epochs -> {out_dir} "
          f"(final ce={last.get('ce', float('nan')):.4f})")
    return EXIT_OK


def _eval_model(cfg: dict):
    eval_cfg = cfg.get("eval") or {}
    paths = eval_cfg.get("checkpoints")
    if not paths:
        raise ConfigError("missing required config field eval.checkpoints")
    if isinstance(paths, str):
        paths = [paths]
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError(f"checkpoint not found: {p}")
    if len(paths) == 1:
        arrays, meta = ckpt.load_checkpoint(paths[0])
    else:
        arrays, meta = average_checkpoints(paths)
    return _model_from_arrays(arrays, meta, ROLE_STUDENT)


def cmd_eval(cfg: dict, protocol: str) -> int:
    dataset = _load_dataset(cfg)
    out_dir = Path(_require(cfg, "data", "out_dir"))
    proto = cfg.get("protocol") or {}
    model, tokenizer, meta = _eval_model(cfg)
    econf = EvalConfig(
        views=proto.get("views", 3),
        frames_per_clip=proto.get("frames_per_clip", 8),
        joint_vocab=bool(proto.get("joint_vocab", False)),
    )
    frozen = None
    if (cfg.get("eval") or {}).get("ensemble_with"):
        frozen, _, _ = _model_from_checkpoint(cfg["eval"]["ensemble_with"],
                                              role=ROLE_TEACHER)

    if protocol == "b2n":
        split_file = proto.get("split_file")
        if not split_file or not Path(split_file).is_file():
            raise ConfigError("protocol.split_file must point at the training "
                              "run's split.json")
        from .datasets import VocabSplit
        split = VocabSplit.from_dict(
            json.loads(Path(split_file).read_text(encoding="utf-8"))
        )
        report = evaluate_base_to_novel(
            model, dataset.test, split, econf, tokenizer=tokenizer,
            ensemble_with=frozen, model_vocab_digest=meta.get("vocab_digest"),
        )
    else:
        source_dir = proto.get("source_data_dir")
        if not source_dir:
            raise ConfigError("missing required config field protocol.source_data_dir")
        source_vocab = ClassVocabulary.load(Path(source_dir) / "vocab.json")
        entries = list(dataset.test.entries)
        num_splits = int(proto.get("num_splits", 3))
        import random as _random
        _random.Random(f"{proto.get('split_seed', 0)}/xds").shuffle(entries)
        splits = [entries[i::num_splits] for i in range(num_splits)]
        report = evaluate_cross_dataset(
            model, source_vocab, dataset.test, splits, econf,
            exclude_overlap=bool(proto.get("exclude_overlap", True)),
            ensemble_with=frozen,
        )

    write_snapshot(cfg, out_dir)
    report.save(out_dir / f"report_{protocol}.json")
    print(format_report(report))
    return EXIT_OK


def cmd_analyze(cfg: dict, mode: str) -> int:
    out_dir = Path(_require(cfg, "data", "out_dir"))
    acfg = cfg.get("analyze") or {}
    if acfg.get("checkpoint"):
        model, tokenizer, _ = _model_from_checkpoint(acfg["checkpoint"],
                                                     role=ROLE_TEACHER)
    else:
        model = build_toy_dual_encoder(_encoder_config(cfg), ROLE_TEACHER)
        tokenizer = None

    if mode == "distance":
        dataset = _load_dataset(cfg)
        test_vocabs = {}
        for name, path in (acfg.get("test_vocabs") or {}).items():
            test_vocabs[name] = ClassVocabulary.load(path)
        if not test_vocabs:
            test_vocabs = {"self": dataset.vocab}
        scored = semantic_distance_report(
            dataset.vocab, test_vocabs, model, tokenizer=tokenizer,
            mode=acfg.get("hausdorff_mode", MODE_SYMMETRIC),
            use_template=bool(acfg.get("use_template", True)),
        )
        write_snapshot(cfg, out_dir)
        doc = [{"vocabulary": n, "similarity": s} for n, s in scored]
        (out_dir / "distance_report.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        for name, sim in scored:
            print(f"{name:>24}: {sim:+.4f}")
        return EXIT_OK

    # attention
    dataset = _load_dataset(cfg)
    clip_id = acfg.get("clip_id")
    entries = dataset.train.entries + dataset.test.entries
    if clip_id:
        matches = [e for e in entries if e.clip_id == clip_id]
        if not matches:
            raise ConfigError(f"clip id {clip_id!r} not found in manifests")
        entry = matches[0]
    else:
        entry = entries[0]
    video = dataset.train.load_frames(entry)
    write_snapshot(cfg, out_dir)
    written = attention_heatmaps(model, video, out_dir / f"attention_{entry.clip_id}")
    print(f"wrote {len(written)} heatmap frames for clip {entry.clip_id}")
    return EXIT_OK


def cmd_selftest() -> int:
    """Fast invariant checks; exit 3 on any failure."""
    failures = []

    def check(name, fn):
        try:
            fn()
            print(f"ok   {name}")
        except Exception as e:  # noqa: BLE001 - report and keep going
            failures.append(name)
            print(f"FAIL {name}: {e}")

    def zero_init_identity():
        h = ResidualHead(16, alpha=0.1)
        z = torch.randn(4, 16)
        assert torch.equal(h(z), z)

    def hm_paper_values():
        assert abs(harmonic_mean(77.8, 64.3) - 70.4) < 0.05
        assert abs(harmonic_mean(95.3, 80.0) - 87.0) < 0.05

    def hausdorff_identity():
        from .analysis import hausdorff_similarity
        v = np.random.default_rng(0).normal(size=(8, 4))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        assert abs(hausdorff_similarity(v, v) - 1.0) < 1e-12

    def schedule_endpoints():
        assert cosine_lr(10, 100, 10, 1e-3) == 1e-3
        assert cosine_lr(100, 100, 10, 1e-3) < 1e-12
        assert abs(cosine_lr(55, 100, 10, 1e-3) - 5e-4) < 1e-12

    def frame_sampling():
        from .datasets import sample_frames
        assert sample_frames(16, 8, "eval") == [1, 3, 5, 7, 9, 11, 13, 15]
        assert sample_frames(8, 8, "eval") == list(range(8))
        assert sample_frames(4, 8, "eval") == [0, 0, 1, 1, 2, 2, 3, 3]

    check("zero-init residual head is the identity", zero_init_identity)
    check("harmonic-mean reference values", hm_paper_values)
    check("hausdorff similarity of a set with itself is 1", hausdorff_identity)
    check("cosine schedule endpoints", schedule_endpoints)
    check("eval frame sampling grid", frame_sampling)
    return EXIT_OK if not failures else EXIT_SELFTEST


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovdistill")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-path config override")

    p = sub.add_parser("prepare", help="generate toy data or description cache")
    p.add_argument("mode", choices=["toy-data", "descriptions"])
    common(p)

    p = sub.add_parser("train", help="run the training loop")
    common(p)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("--protocol", choices=["b2n", "xds"], required=True)
    common(p)

    p = sub.add_parser("analyze", help="semantic distance or attention maps")
    p.add_argument("--mode", choices=["distance", "attention"], required=True)
    common(p)

    sub.add_parser("selftest", help="run fast invariant checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return cmd_selftest()
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "prepare":
            return cmd_prepare(cfg, args.mode)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.protocol)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.mode)
        raise AssertionError(args.command)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
