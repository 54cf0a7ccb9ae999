"""Optimization loop, evaluation metrics, checkpoint selection, persistence.

AdamW with decoupled weight decay, a linear warmup/decay schedule, gradient
accumulation that averages micro-batch losses before stepping, one evaluation
per epoch, and dual-criteria checkpoint selection (0.7 * macro-F1 +
0.3 * mean confidence) with earliest-epoch tie-break and optional early
stopping.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .affect import AffectSchema, LossWeights
from .data import (
    LabeledExample,
    MHLabelSchema,
    Vocabulary,
    augment,
    augmentation_rng,
    encode_batch,
    split_examples,
    tokenize,
)
from .encoder import EncoderConfig
from .errors import ConfigError, DataError, NumericError

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

F1_WEIGHT = 0.7
CONFIDENCE_WEIGHT = 0.3

METRICS_COLUMNS = ("epoch", "train_loss", "macro_f1", "macro_recall", "mean_confidence", "combined_score")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-5
    weight_decay: float = 0.01
    warmup: float = 0.1  # fraction of steps in (0,1), or absolute steps when >= 1
    batch_size: int = 16
    grad_accumulation_steps: int = 2
    epochs: int = 5
    max_seq_len: int = 256
    dropout: float = 0.1
    early_stop_patience: int | None = None
    seed: int = 0
    validation_fraction: float = 0.1
    augment: bool = False
    p_synonym: float = 0.1
    p_deletion: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("learning_rate, batch_size, and epochs must be positive")
        if self.grad_accumulation_steps < 1:
            raise ConfigError("grad_accumulation_steps must be >= 1")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1 when set")

    @classmethod
    def emotion_preset(cls) -> "TrainConfig":
        return cls()

    @classmethod
    def mental_health_preset(cls) -> "TrainConfig":
        return cls(
            learning_rate=1.5e-5,
            warmup=400,
            batch_size=12,
            grad_accumulation_steps=1,
            epochs=10,
            dropout=0.15,
            early_stop_patience=3,
            augment=True,
        )

    def warmup_steps(self, total_steps: int) -> int:
        if self.warmup == 0:
            return 0
        if self.warmup < 1:
            return int(round(total_steps * self.warmup))
        return int(self.warmup)

    def to_jsonable(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "warmup": self.warmup,
            "batch_size": self.batch_size,
            "grad_accumulation_steps": self.grad_accumulation_steps,
            "epochs": self.epochs,
            "max_seq_len": self.max_seq_len,
            "dropout": self.dropout,
            "early_stop_patience": self.early_stop_patience,
            "seed": self.seed,
            "validation_fraction": self.validation_fraction,
            "augment": self.augment,
            "p_synonym": self.p_synonym,
            "p_deletion": self.p_deletion,
        }


def combined_score(macro_f1: float, mean_confidence: float) -> float:
    return F1_WEIGHT * macro_f1 + CONFIDENCE_WEIGHT * mean_confidence


@dataclass(frozen=True)
class Metrics:
    macro_f1: float
    per_class_recall: tuple[float, ...]
    macro_recall: float
    mean_confidence: float
    combined_score: float

    def to_jsonable(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "per_class_recall": list(self.per_class_recall),
            "macro_recall": self.macro_recall,
            "mean_confidence": self.mean_confidence,
            "combined_score": self.combined_score,
        }

    @classmethod
    def from_jsonable(cls, raw: dict) -> "Metrics":
        return cls(
            macro_f1=raw["macro_f1"],
            per_class_recall=tuple(raw["per_class_recall"]),
            macro_recall=raw["macro_recall"],
            mean_confidence=raw["mean_confidence"],
            combined_score=raw["combined_score"],
        )


# -- optimizer -----------------------------------------------------------------


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict,
    lr_t: float,
    decay: float,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> None:
    """One in-place update: decoupled weight decay, then bias-corrected moments."""
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if decay:
            p *= 1.0 - lr_t * decay
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= lr_t * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, params: dict[str, T.Tensor], weight_decay: float):
        self.params = params
        self.weight_decay = weight_decay
        self.state = {
            "step": 0,
            "m": {k: np.zeros_like(v.data) for k, v in params.items()},
            "v": {k: np.zeros_like(v.data) for k, v in params.items()},
        }

    def step(self, lr_t: float) -> None:
        grads = {
            k: (v.grad if v.grad is not None else np.zeros_like(v.data))
            for k, v in self.params.items()
        }
        adamw_step(
            {k: v.data for k, v in self.params.items()},
            grads,
            self.state,
            lr_t,
            self.weight_decay,
        )

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.zero_grad()


def lr_at(step: int, total_steps: int, warmup_steps: int, lr: float) -> float:
    """Linear ramp 0 -> lr across warmup, then linear decay lr -> 0 at total."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    if warmup_steps >= total_steps:
        raise ConfigError(f"warmup ({warmup_steps}) must be shorter than total steps ({total_steps})")
    if step < 0:
        raise ConfigError("step must be >= 0")
    if warmup_steps > 0 and step <= warmup_steps:
        return lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    return lr * (total_steps - step) / (total_steps - warmup_steps)


# -- evaluation ----------------------------------------------------------------


def predict(model, examples: list[LabeledExample], vocab: Vocabulary, config: TrainConfig):
    """Argmax predictions and max-probability confidences, batched, eval mode."""
    preds, confs = [], []
    for start in range(0, len(examples), config.batch_size):
        chunk = examples[start : start + config.batch_size]
        seq = min(config.max_seq_len, 1 + max(len(tokenize(ex.text)) for ex in chunk))
        batch = encode_batch(chunk, vocab, max(seq, 2))
        probs = model.primary_probs(model.forward(batch)).data
        preds.append(probs.argmax(axis=1))
        confs.append(probs.max(axis=1))
    return np.concatenate(preds), np.concatenate(confs)


def _f1_recall(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int):
    f1s, recalls = [], []
    for c in range(num_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
        recalls.append(recall)
    return float(np.mean(f1s)), tuple(recalls)


def evaluate(model, examples: list[LabeledExample], vocab: Vocabulary, config: TrainConfig) -> Metrics:
    if not examples:
        raise DataError("evaluation requires a non-empty example set")
    y_pred, confs = predict(model, examples, vocab, config)
    y_true = np.array([ex.emotion for ex in examples])
    num_classes = model.num_primary_classes
    macro_f1, recalls = _f1_recall(y_true, y_pred, num_classes)
    mean_conf = float(confs.mean())
    return Metrics(
        macro_f1=macro_f1,
        per_class_recall=recalls,
        macro_recall=float(np.mean(recalls)),
        mean_confidence=mean_conf,
        combined_score=combined_score(macro_f1, mean_conf),
    )


def accuracy(model, examples: list[LabeledExample], vocab: Vocabulary, config: TrainConfig) -> float:
    y_pred, _ = predict(model, examples, vocab, config)
    y_true = np.array([ex.emotion for ex in examples])
    return float(np.mean(y_pred == y_true))


def select_checkpoint(history: list[Metrics]) -> int:
    """Index of the maximal combined score; earliest epoch wins ties."""
    if not history:
        raise DataError("cannot select a checkpoint from an empty history")
    return max(range(len(history)), key=lambda i: (history[i].combined_score, -i))


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[Metrics]
    epoch_losses: list[float]
    best_index: int
    best_params: dict[str, np.ndarray]
    stopped_early: bool
    total_steps: int
    steps_taken: int

    @property
    def best_metrics(self) -> Metrics:
        return self.history[self.best_index]


def train(
    model,
    vocab: Vocabulary,
    corpus: list[LabeledExample],
    config: TrainConfig,
    validation: list[LabeledExample] | None = None,
    lexicon: dict[str, tuple[str, ...]] | None = None,
    step_callback=None,
) -> TrainResult:
    """Full training run; returns per-epoch metrics and the best parameter set.

    The corpus is split deterministically by seed unless ``validation`` is
    given or the corpus carries split fields. Micro-batch losses within an
    accumulation group are averaged before the optimizer steps.
    """
    if validation is not None:
        train_examples = [ex for ex in corpus if ex.is_train]
        val_examples = validation
    else:
        train_examples, val_examples = split_examples(corpus, config.seed, config.validation_fraction)
    if not train_examples or not val_examples:
        raise DataError("training requires non-empty train and validation sets")

    params = model.parameters()
    optimizer = AdamW(params, config.weight_decay)

    n = len(train_examples)
    micro_per_epoch = -(-n // config.batch_size)
    steps_per_epoch = -(-micro_per_epoch // config.grad_accumulation_steps)
    total_steps = steps_per_epoch * config.epochs
    warmup = config.warmup_steps(total_steps)
    if warmup >= total_steps:
        raise ConfigError(
            f"warmup resolves to {warmup} steps but the run has only {total_steps}"
        )

    history: list[Metrics] = []
    epoch_losses: list[float] = []
    best_index = -1
    best_score = -np.inf
    best_params: dict[str, np.ndarray] = {}
    stopped_early = False
    global_step = 0

    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 4, epoch]).permutation(n)
        step_losses: list[float] = []
        for group_start in range(0, micro_per_epoch, config.grad_accumulation_steps):
            group = range(
                group_start,
                min(group_start + config.grad_accumulation_steps, micro_per_epoch),
            )
            group_loss = 0.0
            for micro_idx in group:
                sel = order[micro_idx * config.batch_size : (micro_idx + 1) * config.batch_size]
                chunk = [train_examples[i] for i in sel]
                if config.augment and lexicon:
                    chunk = [
                        augment(
                            ex,
                            augmentation_rng(config.seed, epoch, int(orig)),
                            config.p_synonym,
                            config.p_deletion,
                            lexicon,
                        )
                        for ex, orig in zip(chunk, sel)
                    ]
                seq = min(config.max_seq_len, 1 + max(len(tokenize(ex.text)) for ex in chunk))
                batch = encode_batch(chunk, vocab, max(seq, 2))
                rng = np.random.default_rng([config.seed, 7, epoch, micro_idx])
                preds = model.forward(batch, training=True, rng=rng)
                loss = model.loss(preds, batch) / len(group)
                if not np.isfinite(loss.data):
                    raise NumericError(
                        f"training diverged (non-finite loss) at epoch {epoch + 1}; "
                        f"last completed epoch: {len(history)}"
                    )
                T.backward(loss)
                group_loss += loss.item()
            lr_t = lr_at(global_step, total_steps, warmup, config.learning_rate)
            optimizer.step(lr_t)
            optimizer.zero_grad()
            global_step += 1
            step_losses.append(group_loss)
            if step_callback is not None:
                step_callback(global_step, params)
        epoch_losses.append(float(np.mean(step_losses)))

        metrics = evaluate(model, val_examples, vocab, config)
        history.append(metrics)
        if metrics.combined_score > best_score:
            best_score = metrics.combined_score
            best_index = len(history) - 1
            best_params = {k: v.data.copy() for k, v in params.items()}
        if (
            config.early_stop_patience is not None
            and len(history) - 1 - best_index >= config.early_stop_patience
        ):
            stopped_early = True
            break

    return TrainResult(
        history=history,
        epoch_losses=epoch_losses,
        best_index=best_index,
        best_params=best_params,
        stopped_early=stopped_early,
        total_steps=total_steps,
        steps_taken=global_step,
    )


# -- persistence -----------------------------------------------------------------


@dataclass
class Checkpoint:
    task: str
    encoder_config: EncoderConfig
    train_config: TrainConfig
    loss_weights: LossWeights | None
    vocab: Vocabulary
    schema_json: dict
    epoch: int
    metrics: Metrics | None
    tensors: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> None:
    """JSON manifest plus one little-endian float64 binary per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, data) in enumerate(sorted(ckpt.tensors.items())):
        fname = f"tensor_{i:04d}.bin"
        (directory / fname).write_bytes(np.ascontiguousarray(data, dtype="<f8").tobytes())
        entries.append({"name": name, "shape": list(data.shape), "dtype": "<f8", "file": fname})
    manifest = {
        "format": 1,
        "task": ckpt.task,
        "epoch": ckpt.epoch,
        "metrics": None if ckpt.metrics is None else ckpt.metrics.to_jsonable(),
        "encoder": ckpt.encoder_config.to_jsonable(),
        "train": ckpt.train_config.to_jsonable(),
        "loss_weights": None
        if ckpt.loss_weights is None
        else {
            "alpha1": ckpt.loss_weights.alpha1,
            "alpha2": ckpt.loss_weights.alpha2,
            "lambda_excl": ckpt.loss_weights.lambda_excl,
        },
        "vocab": ckpt.vocab.to_jsonable(),
        "schema": ckpt.schema_json,
        "tensors": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {directory}")
    manifest = json.loads(manifest_path.read_text())
    tensors = {}
    for entry in manifest["tensors"]:
        raw = (directory / entry["file"]).read_bytes()
        tensors[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    lw = manifest.get("loss_weights")
    train_cfg = dict(manifest["train"])
    return Checkpoint(
        task=manifest["task"],
        encoder_config=EncoderConfig(**manifest["encoder"]),
        train_config=TrainConfig(**train_cfg),
        loss_weights=None if lw is None else LossWeights(**lw),
        vocab=Vocabulary.from_jsonable(manifest["vocab"]),
        schema_json=manifest["schema"],
        epoch=manifest["epoch"],
        metrics=None if manifest["metrics"] is None else Metrics.from_jsonable(manifest["metrics"]),
        tensors=tensors,
    )


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the model named by the checkpoint and load its tensors."""
    from .heads import EmotionModel
    from .mh import MHModel

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
        weights = ckpt.loss_weights or LossWeights()
        model = EmotionModel.build(ckpt.encoder_config, len(ckpt.vocab), schema, weights, seed=0)
    elif ckpt.task == "mental_health":
        labels = MHLabelSchema(
            categories=tuple(ckpt.schema_json["categories"]),
            intensity_field=ckpt.schema_json.get("intensity_field", "intensity"),
            severity_levels=int(ckpt.schema_json.get("severity_levels", 3)),
        )
        model = MHModel.build(ckpt.encoder_config, len(ckpt.vocab), labels, seed=0)
    else:
        raise DataError(f"unknown checkpoint task {ckpt.task!r}")

    params = model.parameters()
    missing = set(params) ^ set(ckpt.tensors)
    if missing:
        raise DataError(f"checkpoint tensors do not match the model: {sorted(missing)}")
    for name, tensor in params.items():
        if tensor.data.shape != ckpt.tensors[name].shape:
            raise DataError(
                f"tensor {name!r} shape {ckpt.tensors[name].shape} does not match "
                f"model shape {tensor.data.shape}"
            )
        tensor.data[...] = ckpt.tensors[name]
    return model


def write_metrics_csv(path: str | Path, epoch_losses: list[float], history: list[Metrics]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRICS_COLUMNS)
        for i, (loss, m) in enumerate(zip(epoch_losses, history)):
            writer.writerow(
                [i + 1, f"{loss:.10f}", f"{m.macro_f1:.10f}", f"{m.macro_recall:.10f}",
                 f"{m.mean_confidence:.10f}", f"{m.combined_score:.10f}"]
            )
