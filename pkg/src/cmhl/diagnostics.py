"""Built-in gradient verification suites over toy fixtures.

Each suite compares analytic gradients against central finite differences for
one slice of the system: the loss formulas, the encoder stack, or the gating
path. Used by the command-line `gradcheck` and by the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .affect import AffectSchema, LossWeights
from .data import LabeledExample, MHLabelSchema, build_vocab, encode_batch
from .encoder import EncoderConfig
from .errors import ConfigError
from .heads import EmotionModel, exclusivity_loss, task_loss, total_loss
from .mh import MHHeadParams, MHModel, final_prediction, gate_weights, gated_fusion_product, mh_heads_forward, mh_loss

TOLERANCE = 1e-4

SCOPES = ("losses", "encoder", "gate", "all")


@dataclass(frozen=True)
class GradCheckRow:
    component: str
    target: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _toy_texts():
    return [
        LabeledExample(text="glow warm bright", emotion=1, valence=0, intensity=0),
        LabeledExample(text="dust cold gray still", emotion=0, valence=1, intensity=1),
    ]


def _loss_suite(corrupt: bool) -> list[GradCheckRow]:
    schema = AffectSchema.default()
    rng = np.random.default_rng(100)
    rows: list[GradCheckRow] = []
    d = 8
    h_cls = T.tensor(rng.normal(size=(2, d)))
    from .heads import EmotionHeadParams, emotion_heads_forward

    heads = EmotionHeadParams.init(6, d, rng)
    labels = {
        "primary": np.array([1, 0]),
        "valence": np.array([0, 1]),
        "intensity": np.array([0, 1]),
    }
    weights = LossWeights()

    def row(component, target, fn, point, offset=0.0):
        rows.append(GradCheckRow(component, target, T.finite_diff_check(fn, point, grad_offset=offset)))

    # balanced task loss against the shared input and every head parameter
    offset = 1.0 if corrupt else 0.0
    row("task_loss", "h_cls", lambda t: task_loss(emotion_heads_forward(t, heads), labels, weights), h_cls, offset)
    for name, tensor in heads.parameters().items():
        row("task_loss", name, lambda t: task_loss(emotion_heads_forward(h_cls, heads), labels, weights), tensor)

    # exclusivity hinge through the softmax that produces the probabilities
    logits = T.tensor(rng.normal(size=(2, 6)))
    row(
        "exclusivity_loss",
        "logits",
        lambda t: exclusivity_loss(T.softmax(t), schema.thresholds, schema.taxonomy),
        logits,
    )

    # composite objective
    row(
        "total_loss",
        "h_cls",
        lambda t: total_loss(
            emotion_heads_forward(t, heads), labels, weights, schema.thresholds, schema.taxonomy
        ),
        h_cls,
    )

    # adaptive-weight objective, including the learnable weight itself
    mh = MHHeadParams.init(5, d, rng, gate_dim=6)
    labels_m = np.array([2, 0])
    labels_s = np.array([1, -1])

    def mh_forward(h):
        p_m, p_s = mh_heads_forward(h, mh)
        feats = T.concat([p_m, p_s])
        gate = gate_weights(feats, mh)
        fused = gated_fusion_product(feats, gate, mh.block_sizes)
        return final_prediction(fused, mh), p_s

    h_mh = T.tensor(rng.normal(size=(2, d)))
    row(
        "mh_loss",
        "h_cls",
        lambda t: mh_loss(*mh_forward(t), labels_m, labels_s, mh),
        h_mh,
    )
    row(
        "mh_loss",
        "mh.beta_raw",
        lambda t: mh_loss(*mh_forward(h_mh), labels_m, labels_s, mh),
        mh.beta_raw,
    )
    return rows


def _encoder_suite(corrupt: bool) -> list[GradCheckRow]:
    schema = AffectSchema.default()
    examples = _toy_texts()
    vocab = build_vocab(examples, min_freq=1)
    batch = encode_batch(examples, vocab, 5)
    cfg = EncoderConfig(layers=2, heads=2, hidden=8, ffn_dim=16, max_positions=8, dropout=0.0)
    model = EmotionModel.build(cfg, len(vocab), schema, LossWeights(), seed=101)

    def fn(_t):
        return model.loss(model.forward(batch), batch)

    rows = []
    offset = 1.0 if corrupt else 0.0
    for name, tensor in model.encoder.parameters().items():
        rows.append(GradCheckRow("encoder_total_loss", name, T.finite_diff_check(fn, tensor, grad_offset=offset)))
        offset = 0.0
    return rows


def _gate_suite(corrupt: bool) -> list[GradCheckRow]:
    examples = _toy_texts()
    vocab = build_vocab(examples, min_freq=1)
    batch = encode_batch(examples, vocab, 5)
    batch.labels["primary"] = np.array([1, 3])
    batch.labels["intensity"] = np.array([2, -1])
    cfg = EncoderConfig(layers=1, heads=2, hidden=8, ffn_dim=16, max_positions=8, dropout=0.0)
    labels = MHLabelSchema()
    model = MHModel.build(cfg, len(vocab), labels, seed=102)
    model.heads = MHHeadParams.init(5, 8, np.random.default_rng(103), gate_dim=6)

    def fn(_t):
        return model.loss(model.forward(batch), batch)

    rows = []
    offset = 1.0 if corrupt else 0.0
    for name, tensor in model.heads.parameters().items():
        rows.append(GradCheckRow("gate_mh_loss", name, T.finite_diff_check(fn, tensor, grad_offset=offset)))
        offset = 0.0
    return rows


def run_gradcheck(scope: str = "all", corrupt: bool = False) -> list[GradCheckRow]:
    if scope not in SCOPES:
        raise ConfigError(f"scope must be one of {SCOPES}, got {scope!r}")
    rows: list[GradCheckRow] = []
    if scope in ("losses", "all"):
        rows += _loss_suite(corrupt)
        corrupt = False
    if scope in ("encoder", "all"):
        rows += _encoder_suite(corrupt)
        corrupt = False
    if scope in ("gate", "all"):
        rows += _gate_suite(corrupt)
    return rows
