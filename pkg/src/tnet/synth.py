"""Synthetic targeted-sentiment corpus for self-contained checks.

Each sentence carries two targets with opposite sentiments, so a model
that ignores the target cannot fit the data. Used by the gradient-check
command and the overfitting tests; no external files involved.
"""

from __future__ import annotations

import numpy as np

from .pipeline import PAD_TOKEN, UNK_TOKEN, TargetedSentence, random_store

POSITIVE_WORDS = ["great", "tasty", "lovely", "superb", "fast", "friendly", "amazing", "crisp"]
NEGATIVE_WORDS = ["awful", "bland", "slow", "rude", "noisy", "greasy", "buggy", "dull"]
TARGET_WORDS = [
    "pizza", "service", "battery", "screen", "keyboard", "coffee",
    "salad", "staff", "wine", "soup", "laptop", "music",
]
FILLER_WORDS = ["the", "was", "but", "and", "here", "very", "really", "today", "overall", "again"]


def vocabulary():
    return [PAD_TOKEN, UNK_TOKEN] + POSITIVE_WORDS + NEGATIVE_WORDS + TARGET_WORDS + FILLER_WORDS


def make_corpus(n_sentences=16, seed=7):
    """Sentences like "the great pizza but awful service overall": two
    records per sentence, one per target, labels P and N."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_sentences):
        pos = POSITIVE_WORDS[rng.integers(len(POSITIVE_WORDS))]
        neg = NEGATIVE_WORDS[rng.integers(len(NEGATIVE_WORDS))]
        t_a, t_b = rng.choice(len(TARGET_WORDS), size=2, replace=False)
        target_a, target_b = TARGET_WORDS[t_a], TARGET_WORDS[t_b]
        if i % 2 == 0:
            tokens = ["the", pos, target_a, "but", neg, target_b, "overall"]
            spans = [(3, target_a, "P"), (6, target_b, "N")]
        else:
            tokens = ["the", neg, target_a, "but", pos, target_b, "again"]
            spans = [(3, target_a, "N"), (6, target_b, "P")]
        for start, _target, label in spans:
            records.append(
                TargetedSentence(tokens=tokens, target_start=start, target_len=1, label=label)
            )
    return records


def make_store(dim_w=8, seed=7):
    return random_store(vocabulary(), dim_w, seed=seed)


def write_corpus_jsonl(path, records):
    """Dump records back to the native dataset format (for CLI fixtures)."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "sentence": " ".join(rec.tokens),
                        "target": " ".join(rec.target_tokens),
                        "label": rec.label,
                    }
                )
                + "\n"
            )
