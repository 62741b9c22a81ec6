"""Command-line entry points: train, distill, eval, predict, ablate, synth.

Run configuration is the union of projection, encoder, and training
settings plus data paths, read from a JSON file (``--config``) with flags
winning over file values. Every run writes its resolved config next to its
outputs. Exit codes are stable: 0 ok, 2 config error, 3 data error,
4 teacher alignment error, 5 checkpoint error.
"""
from __future__ import annotations

import os

# honor the thread cap before numpy first loads
_threads = os.environ.get("PQRNN_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    LabelSchema,
    align_teacher,
    load_augmented,
    load_dataset,
    load_teacher_logits,
    make_synthetic_grammar,
    merge_augmented,
    tokenize,
    write_teacher_logits,
)
from .encoder import EncoderConfig
from .errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    DataError,
    InputError,
)
from .model import PqrnnModel, export_teacher_logits
from .projection import DEFAULT_SEED, ProjectionConfig
from .training import TrainConfig, evaluate, train_loop

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ALIGNMENT = 4
EXIT_CHECKPOINT = 5


@dataclass
class RunConfig:
    """Union of projection + encoder + training settings and data paths.

    Training-loop defaults here are desk scale (5000 steps, batch 64); the
    full-scale recipe (60000/4096) goes in a config file.
    """

    # projection
    feature_dim: int = 1024
    map_mode: str = "balanced"
    prefix_len: int = 3
    suffix_len: int = 3
    feature_split: tuple = (0.5, 0.25, 0.25)
    projection_seed: int = DEFAULT_SEED
    # encoder
    bottleneck_dim: int = 256
    state_size: int = 128
    num_layers: int = 4
    kernel_width: int = 2
    zoneout_base: float = 0.5
    projection_dropout: float = 0.8
    quantize: bool = True
    batch_norm: bool = True
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99
    # training
    base_lr: float = 1e-3
    lr_decay_rate: float = 0.9
    lr_decay_steps: int = 1000
    l2_scale: float = 1e-5
    steps: int = 5000
    batch_size: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-7
    eval_every: int = 100
    teacher_logit_scale: float = 1.0
    distill_mode: str = "off"
    seed: int = 0
    # data
    train_path: str | None = None
    dev_path: str | None = None
    test_path: str | None = None
    augmented_path: str | None = None
    schema_path: str | None = None
    teacher_logits_path: str | None = None
    dev_teacher_logits_path: str | None = None
    augment_ratio: int = 4

    @classmethod
    def field_names(cls) -> set:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        unknown = set(obj) - cls.field_names()
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "feature_split" in obj:
            obj = dict(obj, feature_split=tuple(obj["feature_split"]))
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        # constructing the per-module configs runs their validators
        self.projection_config()
        self.encoder_config()
        self.train_config()

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["feature_split"] = list(out["feature_split"])
        return out

    def projection_config(self) -> ProjectionConfig:
        return ProjectionConfig(
            feature_dim=self.feature_dim,
            map_mode=self.map_mode,
            prefix_len=self.prefix_len,
            suffix_len=self.suffix_len,
            feature_split=tuple(self.feature_split),
            seed=self.projection_seed,
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            feature_dim=self.feature_dim,
            bottleneck_dim=self.bottleneck_dim,
            state_size=self.state_size,
            num_layers=self.num_layers,
            kernel_width=self.kernel_width,
            zoneout_base=self.zoneout_base,
            projection_dropout=self.projection_dropout,
            quantize=self.quantize,
            batch_norm=self.batch_norm,
            bn_epsilon=self.bn_epsilon,
            bn_momentum=self.bn_momentum,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr,
            lr_decay_rate=self.lr_decay_rate,
            lr_decay_steps=self.lr_decay_steps,
            l2_scale=self.l2_scale,
            steps=self.steps,
            batch_size=self.batch_size,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_epsilon=self.adam_epsilon,
            eval_every=self.eval_every,
            teacher_logit_scale=self.teacher_logit_scale,
            distill_mode=self.distill_mode,
            seed=self.seed,
        )


def load_run_config(args) -> RunConfig:
    obj = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    overrides = {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "teacher_logit_scale": getattr(args, "teacher_logit_scale", None),
        "augment_ratio": getattr(args, "augment_ratio", None),
        "seed": args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            obj[key] = value
    return RunConfig.from_dict(obj)


def _require_file(path, what: str) -> Path:
    if path is None:
        raise DataError(f"no {what} configured")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_splits(cfg: RunConfig):
    schema = LabelSchema.load(_require_file(cfg.schema_path, "schema file")) if cfg.schema_path else None
    train, schema = load_dataset(_require_file(cfg.train_path, "train file"), schema)
    dev, _ = load_dataset(_require_file(cfg.dev_path, "dev file"), schema)
    return train, dev, schema


def _write_outputs(out_dir: Path, cfg: RunConfig, model: PqrnnModel, history) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n", encoding="utf-8")
    ckpt = out_dir / "model.ckpt"
    model.save(ckpt)
    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
    return {"checkpoint": str(ckpt), "metrics": str(out_dir / "metrics.jsonl")}


def _build_model(cfg: RunConfig, schema: LabelSchema) -> PqrnnModel:
    return PqrnnModel(cfg.projection_config(), cfg.encoder_config(), schema, seed=cfg.seed)


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    train, dev, schema = _load_splits(cfg)
    model = _build_model(cfg, schema)
    _, history = train_loop(train, dev, model, cfg.train_config())
    paths = _write_outputs(Path(args.out_dir), cfg, model, history)
    best = max(h["dev_exact_match"] for h in history)
    print(json.dumps({"command": "train", "best_dev_exact_match": best, **paths}))
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = load_run_config(args)
    if cfg.distill_mode == "off":
        cfg.distill_mode = "soft_only"
    train, dev, schema = _load_splits(cfg)
    records = load_teacher_logits(_require_file(cfg.teacher_logits_path or args.teacher_logits, "teacher logits file"))
    augmented = []
    if cfg.augmented_path:
        augmented = load_augmented(_require_file(cfg.augmented_path, "augmented pool"))
    merged = merge_augmented(train, augmented, cfg.augment_ratio, seed=cfg.seed)
    align_teacher(merged, records)  # fail fast with the offending ids
    dev_records = None
    if cfg.dev_teacher_logits_path:
        dev_records = load_teacher_logits(_require_file(cfg.dev_teacher_logits_path, "dev teacher logits"))
        align_teacher(dev, dev_records)
    model = _build_model(cfg, schema)
    _, history = train_loop(
        merged,
        dev,
        model,
        cfg.train_config(),
        teacher_records=records,
        dev_teacher_records=dev_records,
    )
    paths = _write_outputs(Path(args.out_dir), cfg, model, history)
    best = max(h["dev_exact_match"] for h in history)
    print(json.dumps({"command": "distill", "best_dev_exact_match": best, **paths}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = PqrnnModel.load(_require_checkpoint(args.checkpoint))
    examples, _ = load_dataset(_require_file(args.data, "eval file"), model.schema)
    result = evaluate(model, examples)
    print(json.dumps(result))
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "eval.json").write_text(json.dumps(result, indent=1) + "\n", encoding="utf-8")
    return EXIT_OK


def _require_checkpoint(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    return p


def cmd_predict(args) -> int:
    model = PqrnnModel.load(_require_checkpoint(args.checkpoint))
    lines = [line.rstrip("\n") for line in (args.input or sys.stdin)]
    queries = []
    ids = []
    for i, line in enumerate(lines, 1):
        if not line.strip():
            print(f"warning: skipping empty line {i}", file=sys.stderr)
            continue
        ids.append(f"q{i}")
        queries.append(tokenize(line))
    start = time.perf_counter()
    parses = model.predict_batch(queries)
    elapsed = time.perf_counter() - start
    for qid, tokens, parse in zip(ids, queries, parses):
        record = {
            "id": qid,
            "intent": model.schema.intents[parse.intent],
            "intent_prob": float(parse.intent_probs[parse.intent]),
            "slots": [
                {
                    "token": tok,
                    "label": label,
                    "prob": float(parse.arg_probs[t].max()),
                }
                for t, (tok, label) in enumerate(zip(tokens, parse.slots))
            ],
        }
        print(json.dumps(record))
    if args.bench and queries:
        print(f"throughput: {len(queries) / max(elapsed, 1e-9):.1f} queries/sec", file=sys.stderr)
    return EXIT_OK


ABLATION_SWITCHES = (
    ("default", None, None),
    ("quantization_off", "quantize", False),
    ("batch_norm_off", "batch_norm", False),
    ("unbalanced_map", "map_mode", "unbalanced"),
    ("zoneout_off", "zoneout_base", 0.0),
    ("half_state", "state_size", None),  # value computed from the base config
    ("half_bottleneck", "bottleneck_dim", None),
    ("half_features", "feature_dim", None),
)


def ablation_grid(base: RunConfig) -> list:
    """The one-switch-at-a-time grid: default plus seven single-field variants."""
    grid = []
    for name, field_name, value in ABLATION_SWITCHES:
        variant = RunConfig.from_dict(base.to_dict())
        if field_name is not None:
            if value is None:
                value = getattr(base, field_name) // 2
            setattr(variant, field_name, value)
            variant.validate()
        grid.append({"name": name, "field": field_name, "value": value, "config": variant})
    return grid


def cmd_ablate(args) -> int:
    cfg = load_run_config(args)
    train, dev, schema = _load_splits(cfg)
    test = dev
    if cfg.test_path:
        test, _ = load_dataset(_require_file(cfg.test_path, "test file"), schema)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in ablation_grid(cfg):
        variant_cfg = entry["config"]
        model = _build_model(variant_cfg, schema)
        train_loop(train, dev, model, variant_cfg.train_config())
        scores = evaluate(model, test)
        row = {
            "variant": entry["name"],
            "field": entry["field"] or "",
            "value": "" if entry["value"] is None else entry["value"],
            "intent_accuracy": scores["intent_accuracy"],
            "slot_f1": scores["slot_f1"],
            "exact_match": scores["exact_match"],
        }
        rows.append(row)
        print(json.dumps(row))
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n", encoding="utf-8")
    columns = ["variant", "field", "value", "intent_accuracy", "slot_f1", "exact_match"]
    with open(out_dir / "ablation.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(str(row[c]) for c in columns) + "\n")
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_synth(args) -> int:
    paths = make_synthetic_grammar(
        seed=args.seed if args.seed is not None else 0,
        n_examples=args.examples,
        n_intents=args.intents,
        n_slot_types=args.slot_types,
        vocab_size=args.vocab,
        out_dir=args.out_dir,
        augmented_factor=args.augmented_factor,
    )
    print(json.dumps(paths))
    return EXIT_OK


def cmd_export_logits(args) -> int:
    model = PqrnnModel.load(_require_checkpoint(args.checkpoint))
    examples = []
    for path in args.data:
        p = _require_file(path, "query file")
        if args.unlabeled:
            examples.extend(load_augmented(p))
        else:
            part, _ = load_dataset(p, model.schema)
            examples.extend(part)
    records = export_teacher_logits(model, examples)
    write_teacher_logits(records, args.out)
    print(json.dumps({"command": "export-logits", "records": len(records), "out": args.out}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pqrnn",
        description="Projection QRNN for joint intent classification and slot tagging",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, teacher=False):
        p.add_argument("--config", help="JSON run config; flags override file values")
        p.add_argument("--steps", type=int, help="training steps")
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir", default="pqrnn-out")
        if teacher:
            p.add_argument("--teacher-logit-scale", type=float, dest="teacher_logit_scale")
            p.add_argument("--augment-ratio", type=int, dest="augment_ratio")

    p = sub.add_parser("train", help="supervised training run")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill", help="distillation run from teacher logits")
    common(p, teacher=True)
    p.add_argument("--teacher-logits", dest="teacher_logits", help="JSONL teacher logits (fallback for config)")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="parse queries from stdin to JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bench", action="store_true", help="report queries/sec")
    p.add_argument("--input", type=argparse.FileType("r"), help="read queries from a file instead of stdin")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("ablate", help="one-switch-at-a-time ablation grid")
    common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("synth", help="generate the synthetic grammar dataset")
    p.add_argument("--out-dir", dest="out_dir", default="synthetic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--examples", type=int, default=200)
    p.add_argument("--intents", type=int, default=5)
    p.add_argument("--slot-types", type=int, dest="slot_types", default=8)
    p.add_argument("--vocab", type=int, default=120)
    p.add_argument("--augmented-factor", type=int, dest="augmented_factor", default=8)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("export-logits", help="write teacher logits from a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True, help="labeled TSVs (or unlabeled with --unlabeled)")
    p.add_argument("--unlabeled", action="store_true", help="treat inputs as 2-column augmented TSVs")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_logits)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AlignmentError as exc:
        print(f"alignment error: {exc}", file=sys.stderr)
        return EXIT_ALIGNMENT
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, InputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
