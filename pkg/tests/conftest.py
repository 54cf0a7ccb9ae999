"""Shared fixtures: synthetic corpora with learnable token-class structure."""

import json

import numpy as np
import pytest

from cmhl.affect import AffectSchema
from cmhl.data import LabeledExample

CLASS_WORDS = {
    "sadness": ("grief", "weeping", "hollow", "mourning"),
    "joy": ("sunshine", "laughing", "celebrate", "delight"),
    "love": ("darling", "tender", "devotion", "embrace"),
    "anger": ("furious", "slammed", "shouting", "rage"),
    "fear": ("trembling", "lurking", "dread", "shiver"),
    "surprise": ("sudden", "unexpected", "gasp", "astonish"),
}

FILLERS = ("i", "feel", "the", "today", "it", "was", "really", "so", "this", "and")


def synthetic_emotion_examples(n: int, seed: int, schema: AffectSchema) -> list[LabeledExample]:
    """Balanced six-class corpus; every text carries three class words and
    three fillers in random order, so classes are cleanly separable."""
    rng = np.random.default_rng(seed)
    names = schema.taxonomy.emotions
    examples = []
    for i in range(n):
        name = names[i % len(names)]
        words = list(rng.choice(CLASS_WORDS[name], size=3, replace=True))
        words += list(rng.choice(FILLERS, size=3, replace=True))
        rng.shuffle(words)
        emotion = schema.taxonomy.index(name)
        examples.append(
            LabeledExample(
                text=" ".join(words),
                emotion=emotion,
                valence=schema.derive_valence(emotion),
                intensity=schema.derive_intensity(emotion),
            )
        )
    return examples


def contradiction_examples(n: int, seed: int, schema: AffectSchema) -> list[LabeledExample]:
    """Ambiguous fixture: every text mixes joy and anger words; labels split
    evenly between the two, inviting simultaneous high joy/anger mass."""
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n):
        words = list(rng.choice(CLASS_WORDS["joy"], size=2, replace=True))
        words += list(rng.choice(CLASS_WORDS["anger"], size=2, replace=True))
        words += list(rng.choice(FILLERS, size=2, replace=True))
        rng.shuffle(words)
        name = "joy" if i % 2 == 0 else "anger"
        emotion = schema.taxonomy.index(name)
        examples.append(
            LabeledExample(
                text=" ".join(words),
                emotion=emotion,
                valence=schema.derive_valence(emotion),
                intensity=schema.derive_intensity(emotion),
            )
        )
    return examples


def write_corpus_jsonl(path, examples, schema: AffectSchema, extra_fields=None) -> None:
    rows = []
    for ex in examples:
        row = {"text": ex.text, "label": schema.taxonomy.emotions[ex.emotion]}
        if ex.split:
            row["split"] = ex.split
        if extra_fields:
            row.update(extra_fields)
        rows.append(json.dumps(row))
    path.write_text("\n".join(rows) + "\n")


@pytest.fixture(scope="session")
def default_schema():
    return AffectSchema.default()
