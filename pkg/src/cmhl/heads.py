"""Emotion-task heads and the composite objective.

Three softmax heads share the pooled CLS vector. The objective is the
label-balanced sum of their cross-entropies plus a hinge penalty whenever an
opposing (positive, negative) emotion pair's probabilities sum past that
pair's threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .affect import AffectSchema, EmotionTaxonomy, LossWeights, ThresholdMatrix
from .data import UNLABELED, Batch
from .encoder import Encoder, cls_pool
from .errors import DataError, ShapeError

N_VALENCE = 3
N_INTENSITY = 2


@dataclass
class EmotionHeadParams:
    """Affine projections `[hidden -> classes]` for the three heads."""

    w_e: T.Tensor
    b_e: T.Tensor
    w_v: T.Tensor
    b_v: T.Tensor
    w_i: T.Tensor
    b_i: T.Tensor

    @classmethod
    def init(cls, num_emotions: int, hidden: int, rng: np.random.Generator) -> "EmotionHeadParams":
        return cls(
            w_e=T.param((hidden, num_emotions), rng),
            b_e=T.zeros(num_emotions, requires_grad=True),
            w_v=T.param((hidden, N_VALENCE), rng),
            b_v=T.zeros(N_VALENCE, requires_grad=True),
            w_i=T.param((hidden, N_INTENSITY), rng),
            b_i=T.zeros(N_INTENSITY, requires_grad=True),
        )

    def parameters(self) -> dict[str, T.Tensor]:
        return {
            "head.w_e": self.w_e,
            "head.b_e": self.b_e,
            "head.w_v": self.w_v,
            "head.b_v": self.b_v,
            "head.w_i": self.w_i,
            "head.b_i": self.b_i,
        }


@dataclass
class EmotionPrediction:
    p_e: T.Tensor  # [batch, num_emotions]
    p_v: T.Tensor  # [batch, 3]
    p_i: T.Tensor  # [batch, 2]


def emotion_heads_forward(h_cls: T.Tensor, params: EmotionHeadParams) -> EmotionPrediction:
    if h_cls.data.ndim != 2 or h_cls.shape[1] != params.w_e.shape[0]:
        raise ShapeError(f"h_cls {h_cls.shape} does not match head input {params.w_e.shape[0]}")
    return EmotionPrediction(
        p_e=T.softmax(T.matmul(h_cls, params.w_e) + params.b_e),
        p_v=T.softmax(T.matmul(h_cls, params.w_v) + params.b_v),
        p_i=T.softmax(T.matmul(h_cls, params.w_i) + params.b_i),
    )


def task_loss(preds: EmotionPrediction, labels: dict[str, np.ndarray], weights: LossWeights) -> T.Tensor:
    """Primary cross-entropy plus weighted valence and intensity terms."""
    for key in ("valence", "intensity"):
        if np.any(labels[key] == UNLABELED):
            raise DataError(f"emotion task requires derived {key} labels on every example")
    return (
        T.cross_entropy(preds.p_e, labels["primary"])
        + weights.alpha1 * T.cross_entropy(preds.p_v, labels["valence"])
        + weights.alpha2 * T.cross_entropy(preds.p_i, labels["intensity"])
    )


def exclusivity_loss(p_e: T.Tensor, thresholds: ThresholdMatrix, taxonomy: EmotionTaxonomy) -> T.Tensor:
    """Batch-mean hinge on opposing-pair probability sums above their thresholds."""
    probs = p_e.reshape(1, p_e.shape[0]) if p_e.data.ndim == 1 else p_e
    rows = probs.shape[0]
    pos_idx, neg_idx = taxonomy.positive, taxonomy.negative
    tau = np.array([[thresholds.get(i, j) for j in neg_idx] for i in pos_idx])
    pos = T.gather(probs, pos_idx, axis=-1).reshape(rows, len(pos_idx), 1)
    neg = T.gather(probs, neg_idx, axis=-1).reshape(rows, 1, len(neg_idx))
    hinged = T.relu(pos + neg - T.tensor(tau))
    return hinged.sum(axis=2).sum(axis=1).mean()


def total_loss(
    preds: EmotionPrediction,
    labels: dict[str, np.ndarray],
    weights: LossWeights,
    thresholds: ThresholdMatrix,
    taxonomy: EmotionTaxonomy,
) -> T.Tensor:
    return task_loss(preds, labels, weights) + weights.lambda_excl * exclusivity_loss(
        preds.p_e, thresholds, taxonomy
    )


class EmotionModel:
    """Encoder plus the three emotion heads and the composite objective."""

    task = "emotion"

    def __init__(self, encoder: Encoder, heads: EmotionHeadParams, schema: AffectSchema, weights: LossWeights):
        self.encoder = encoder
        self.heads = heads
        self.schema = schema
        self.weights = weights

    @classmethod
    def build(
        cls,
        encoder_config,
        vocab_size: int,
        schema: AffectSchema,
        weights: LossWeights,
        seed: int,
    ) -> "EmotionModel":
        rng = np.random.default_rng([seed, 1])
        encoder = Encoder(encoder_config, vocab_size, rng)
        heads = EmotionHeadParams.init(len(schema.taxonomy), encoder_config.hidden, rng)
        return cls(encoder, heads, schema, weights)

    def parameters(self) -> dict[str, T.Tensor]:
        return {**self.encoder.parameters(), **self.heads.parameters()}

    @property
    def num_primary_classes(self) -> int:
        return len(self.schema.taxonomy)

    def forward(self, batch: Batch, *, training: bool = False, rng=None) -> EmotionPrediction:
        h_cls = cls_pool(self.encoder.forward(batch, training=training, rng=rng))
        return emotion_heads_forward(h_cls, self.heads)

    def loss(self, preds: EmotionPrediction, batch: Batch) -> T.Tensor:
        return total_loss(
            preds, batch.labels, self.weights, self.schema.thresholds, self.schema.taxonomy
        )

    def primary_probs(self, preds: EmotionPrediction) -> T.Tensor:
        return preds.p_e
