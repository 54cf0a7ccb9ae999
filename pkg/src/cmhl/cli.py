"""Command-line surface: derive-labels, train, eval, gradcheck.

Run configs are flat JSON files; presets are applied per task and overridden
by the file's `train` / `encoder` / `loss_weights` sections. The environment
variable CMHL_SEED overrides the configured seed. Exit codes: 0 success,
2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from .affect import INTENSITY_LABELS, VALENCE_LABELS, AffectSchema, LossWeights
from .data import (
    MHLabelSchema,
    build_vocab,
    default_lexicon,
    load_corpus,
    load_mh_corpus,
    load_synonyms,
    split_examples,
)
from .diagnostics import SCOPES, TOLERANCE, run_gradcheck
from .encoder import EncoderConfig
from .errors import ConfigError, DataError, NumericError
from .heads import EmotionModel
from .mh import MHModel
from .training import (
    Checkpoint,
    TrainConfig,
    accuracy,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
    write_metrics_csv,
)

SEED_ENV = "CMHL_SEED"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

TASKS = ("emotion", "mental_health")

_PATH_KEYS = {"train", "validation", "schema", "lexicon", "output"}
_TOP_KEYS = {"task", "seed", "paths", "train", "encoder", "loss_weights", "vocab_min_freq"}


@dataclasses.dataclass
class RunConfig:
    task: str
    seed: int
    paths: dict[str, str | None]
    train_config: TrainConfig
    encoder_config: EncoderConfig
    loss_weights: LossWeights
    vocab_min_freq: int

    def to_jsonable(self) -> dict:
        return {
            "task": self.task,
            "seed": self.seed,
            "paths": self.paths,
            "train": self.train_config.to_jsonable(),
            "encoder": self.encoder_config.to_jsonable(),
            "loss_weights": dataclasses.asdict(self.loss_weights),
            "vocab_min_freq": self.vocab_min_freq,
        }


def _apply_overrides(base, overrides: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(base)}
    unknown = set(overrides) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section!r} section: {sorted(unknown)}")
    if section == "train" and "seed" in overrides:
        raise ConfigError("set the seed at the top level, not inside 'train'")
    return dataclasses.replace(base, **overrides)


def load_run_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    task = raw.get("task", "emotion")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")

    paths = dict.fromkeys(_PATH_KEYS)
    paths.update(raw.get("paths", {}))
    if set(paths) - _PATH_KEYS:
        raise ConfigError(f"unknown keys in 'paths': {sorted(set(paths) - _PATH_KEYS)}")

    preset = TrainConfig.emotion_preset() if task == "emotion" else TrainConfig.mental_health_preset()
    train_config = _apply_overrides(preset, raw.get("train", {}), "train")
    encoder_config = _apply_overrides(EncoderConfig(), raw.get("encoder", {}), "encoder")
    loss_weights = _apply_overrides(LossWeights(), raw.get("loss_weights", {}), "loss_weights")

    seed = int(raw.get("seed", 0))
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    train_config = dataclasses.replace(train_config, seed=seed)

    return RunConfig(
        task=task,
        seed=seed,
        paths=paths,
        train_config=train_config,
        encoder_config=encoder_config,
        loss_weights=loss_weights,
        vocab_min_freq=int(raw.get("vocab_min_freq", 1)),
    )


# -- subcommands -----------------------------------------------------------------


def cmd_derive_labels(args) -> int:
    schema = AffectSchema.from_json(args.schema) if args.schema else AffectSchema.default()
    in_path, out_path = Path(args.input), Path(args.output)
    lines_out: list[str] = []
    rejected: list[tuple[int, str]] = []
    with open(in_path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                label = obj.get("label")
                if isinstance(label, str):
                    emotion = schema.taxonomy.index(label)
                elif isinstance(label, int):
                    emotion = schema.taxonomy.check_index(label)
                else:
                    raise DataError(f"label missing or malformed: {label!r}")
                obj.pop("valence", None)
                obj.pop("intensity", None)
                obj["valence"] = VALENCE_LABELS[schema.derive_valence(emotion)]
                obj["intensity"] = INTENSITY_LABELS[schema.derive_intensity(emotion)]
                lines_out.append(json.dumps(obj))
            except (json.JSONDecodeError, DataError) as exc:
                rejected.append((line_no, str(exc)))
    for line_no, reason in rejected:
        print(f"rejected line {line_no}: {reason}", file=sys.stderr)
    if rejected and not args.skip_bad:
        raise DataError(f"{len(rejected)} rejected line(s); rerun with --skip-bad to drop them")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines_out) + ("\n" if lines_out else ""))
    print(f"wrote {len(lines_out)} labeled lines to {out_path}")
    return EXIT_OK


def _load_task_corpus(path, cfg: RunConfig, schema, labels):
    if cfg.task == "emotion":
        examples, _ = load_corpus(path, schema)
    else:
        examples, _ = load_mh_corpus(path, labels)
    return examples


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if not cfg.paths.get("train"):
        raise ConfigError("config must set paths.train")
    if not cfg.paths.get("output"):
        raise ConfigError("config must set paths.output")
    if cfg.train_config.max_seq_len > cfg.encoder_config.max_positions:
        raise ConfigError(
            f"max_seq_len {cfg.train_config.max_seq_len} exceeds encoder "
            f"max_positions {cfg.encoder_config.max_positions}"
        )
    out_dir = Path(cfg.paths["output"])
    out_dir.mkdir(parents=True, exist_ok=True)

    if cfg.task == "emotion":
        schema = AffectSchema.from_json(cfg.paths["schema"]) if cfg.paths.get("schema") else AffectSchema.default()
        labels = None
        schema_json = schema.to_jsonable()
    else:
        schema = None
        labels = MHLabelSchema.from_json(cfg.paths["schema"]) if cfg.paths.get("schema") else MHLabelSchema()
        schema_json = labels.to_jsonable()

    corpus = _load_task_corpus(cfg.paths["train"], cfg, schema, labels)
    if cfg.paths.get("validation"):
        train_examples = [ex for ex in corpus if ex.is_train]
        val_examples = _load_task_corpus(cfg.paths["validation"], cfg, schema, labels)
    else:
        train_examples, val_examples = split_examples(
            corpus, cfg.seed, cfg.train_config.validation_fraction
        )

    vocab = build_vocab(train_examples, cfg.vocab_min_freq)
    if cfg.task == "emotion":
        model = EmotionModel.build(cfg.encoder_config, len(vocab), schema, cfg.loss_weights, cfg.seed)
    else:
        model = MHModel.build(cfg.encoder_config, len(vocab), labels, cfg.seed)

    lexicon = None
    if cfg.train_config.augment:
        lexicon = load_synonyms(cfg.paths["lexicon"]) if cfg.paths.get("lexicon") else default_lexicon()

    started = time.time()
    result = train(model, vocab, train_examples, cfg.train_config, validation=val_examples, lexicon=lexicon)
    wall = time.time() - started

    ckpt_dir = out_dir / "checkpoint"
    save_checkpoint(
        Checkpoint(
            task=cfg.task,
            encoder_config=cfg.encoder_config,
            train_config=cfg.train_config,
            loss_weights=cfg.loss_weights if cfg.task == "emotion" else None,
            vocab=vocab,
            schema_json=schema_json,
            epoch=result.best_index + 1,
            metrics=result.best_metrics,
            tensors=result.best_params,
        ),
        ckpt_dir,
    )
    write_metrics_csv(out_dir / "metrics.csv", result.epoch_losses, result.history)

    summary = {
        "task": cfg.task,
        "best_epoch": result.best_index + 1,
        "best_combined_score": result.best_metrics.combined_score,
        "best_macro_f1": result.best_metrics.macro_f1,
        "epochs_run": len(result.history),
        "optimizer_steps": result.steps_taken,
        "stopped_early": result.stopped_early,
        "train_accuracy": accuracy(model, train_examples, vocab, cfg.train_config),
        "wall_time_s": wall,
        "checkpoint": str(ckpt_dir),
        "config": cfg.to_jsonable(),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps({k: summary[k] for k in ("task", "best_epoch", "best_combined_score",
                                              "train_accuracy", "epochs_run", "stopped_early")}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    if ckpt.task == "emotion":
        schema = AffectSchema.build(
            emotions=ckpt.schema_json["emotions"],
            positive=ckpt.schema_json["positive"],
            negative=ckpt.schema_json["negative"],
            coords=ckpt.schema_json["coords"],
            tau0=ckpt.schema_json["tau0"],
            scale=ckpt.schema_json["scale"],
            high=ckpt.schema_json.get("high"),
        )
        examples, _ = load_corpus(args.corpus, schema)
        class_names = schema.taxonomy.emotions
    else:
        labels = MHLabelSchema(
            categories=tuple(ckpt.schema_json["categories"]),
            intensity_field=ckpt.schema_json.get("intensity_field", "intensity"),
            severity_levels=int(ckpt.schema_json.get("severity_levels", 3)),
        )
        examples, _ = load_mh_corpus(args.corpus, labels)
        class_names = labels.categories

    metrics = evaluate(model, examples, ckpt.vocab, ckpt.train_config)
    payload = metrics.to_jsonable()
    print(json.dumps(payload, indent=2))
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(json.dumps(payload, indent=2))
    if args.dump_predictions:
        from .training import predict

        y_pred, confs = predict(model, examples, ckpt.vocab, ckpt.train_config)
        import csv as _csv

        Path(args.dump_predictions).parent.mkdir(parents=True, exist_ok=True)
        with open(args.dump_predictions, "w", newline="") as handle:
            writer = _csv.writer(handle)
            writer.writerow(["index", "true_label", "predicted_label", "confidence"])
            for i, (ex, pred, conf) in enumerate(zip(examples, y_pred, confs)):
                writer.writerow([i, class_names[ex.emotion], class_names[pred], f"{conf:.10f}"])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    started = time.time()
    rows = run_gradcheck(args.scope, corrupt=args.inject_error)
    elapsed = time.time() - started
    width = max(len(f"{r.component}/{r.target}") for r in rows)
    for r in rows:
        status = "ok" if r.passed else "FAIL"
        print(f"{(r.component + '/' + r.target).ljust(width)}  {r.error:12.3e}  {status}")
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks below {TOLERANCE:g} in {elapsed:.1f}s")
    if failed:
        raise NumericError(f"{len(failed)} gradient check(s) exceeded {TOLERANCE:g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmhl",
        description="Emotionally consistent multi-task text classification kit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("derive-labels", help="add derived valence/intensity fields to a corpus")
    p.add_argument("input", help="input JSONL corpus with text and label fields")
    p.add_argument("--schema", help="affect schema JSON (defaults to the built-in six emotions)")
    p.add_argument("--output", required=True, help="output JSONL path")
    p.add_argument("--skip-bad", action="store_true", help="drop rejected lines instead of failing")
    p.set_defaults(func=cmd_derive_labels)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True, help="run config JSON (task, paths, overrides)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a corpus")
    p.add_argument("checkpoint", help="checkpoint directory written by train")
    p.add_argument("corpus", help="JSONL corpus to evaluate")
    p.add_argument("--output", help="also write the metrics JSON to this path")
    p.add_argument("--dump-predictions", help="write per-example argmax and confidence CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--scope", choices=SCOPES, default="all", help="which suite to run")
    p.add_argument(
        "--inject-error",
        action="store_true",
        help="self-test hook: corrupt one gradient so the run must fail",
    )
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
