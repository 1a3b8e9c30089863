"""Dataset ingestion, embeddings, batching and evaluation metrics.

The native dataset format is UTF-8 JSON lines, one record per line:

    {"sentence": "great food but the service was dreadful !",
     "target": "service", "label": "N"}

``target_occurrence_index`` (0-based) is required whenever the target
token sequence appears more than once in the sentence. Records labeled
"conflict" are dropped with a logged count.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .head import position_relevance

logger = logging.getLogger(__name__)

LABELS = ("P", "N", "O")
LABEL_TO_INDEX = {label: i for i, label in enumerate(LABELS)}

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_LABEL_ALIASES = {
    "p": "P", "positive": "P",
    "n": "N", "negative": "N",
    "o": "O", "neutral": "O",
}


class DatasetError(ValueError):
    """Malformed dataset content; message carries the offending line number."""


class DegenerateInputError(ValueError):
    """Statistical test input has no usable variance."""


@dataclass
class TargetedSentence:
    """One supervision unit: tokens, a 1-based target span and a gold label."""

    tokens: list
    target_start: int  # 1-based index of the first target word
    target_len: int
    label: str

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("sentence has no tokens")
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.target_len < 1:
            raise ValueError(f"target length must be >= 1, got {self.target_len}")
        if not (1 <= self.target_start and self.target_start + self.target_len - 1 <= len(self.tokens)):
            raise ValueError(
                f"target span ({self.target_start}, len {self.target_len}) outside "
                f"sentence of {len(self.tokens)} tokens"
            )

    @property
    def target_tokens(self):
        lo = self.target_start - 1
        return self.tokens[lo : lo + self.target_len]

    @property
    def n(self):
        return len(self.tokens)


def _find_occurrences(tokens, target_tokens):
    m = len(target_tokens)
    return [i for i in range(len(tokens) - m + 1) if tokens[i : i + m] == target_tokens]


def parse_dataset(path, format="jsonl"):
    """Read a dataset file into TargetedSentence records, in file order.

    Tokens are lowercased; tokenization is whitespace splitting of the
    pre-tokenized text. Conflict-labeled records are skipped (count
    logged); any other malformed content raises with its line number.
    """
    if format != "jsonl":
        raise ValueError(f"unsupported dataset format {format!r}")
    records = []
    dropped_conflict = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            try:
                sentence = obj["sentence"]
                target = obj["target"]
                raw_label = str(obj["label"])
            except (KeyError, TypeError):
                raise DatasetError(
                    f"{path}:{lineno}: record needs 'sentence', 'target' and 'label'"
                ) from None
            if raw_label.lower() == "conflict":
                dropped_conflict += 1
                continue
            label = _LABEL_ALIASES.get(raw_label.lower())
            if label is None:
                raise DatasetError(f"{path}:{lineno}: unknown label {raw_label!r}")
            tokens = sentence.lower().split()
            target_tokens = target.lower().split()
            if not tokens or not target_tokens:
                raise DatasetError(f"{path}:{lineno}: empty sentence or target")
            occurrences = _find_occurrences(tokens, target_tokens)
            if not occurrences:
                raise DatasetError(f"{path}:{lineno}: target {target!r} not found in sentence")
            which = obj.get("target_occurrence_index")
            if which is None:
                if len(occurrences) > 1:
                    raise DatasetError(
                        f"{path}:{lineno}: target {target!r} occurs {len(occurrences)} "
                        "times; set target_occurrence_index"
                    )
                which = 0
            if not (0 <= which < len(occurrences)):
                raise DatasetError(
                    f"{path}:{lineno}: target_occurrence_index {which} out of range "
                    f"(found {len(occurrences)} occurrences)"
                )
            records.append(
                TargetedSentence(
                    tokens=tokens,
                    target_start=occurrences[which] + 1,
                    target_len=len(target_tokens),
                    label=label,
                )
            )
    if dropped_conflict:
        logger.warning("%s: dropped %d conflict-labeled records", path, dropped_conflict)
    if not records:
        logger.warning("%s: no records parsed", path)
    return records


# ---------------------------------------------------------------------------
# vocabulary and embeddings
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingStore:
    """Token -> id map plus the (|V| x dim_w) embedding matrix.

    Row 0 is the padding vector, frozen at zero and excluded from updates;
    row 1 is the unknown-token vector used for tokens unseen at build time.
    """

    vocab: dict
    matrix: np.ndarray
    pad_id: int = 0
    unk_id: int = 1

    @property
    def dim_w(self):
        return self.matrix.shape[1]

    def ids(self, tokens):
        return np.array([self.vocab.get(t, self.unk_id) for t in tokens], dtype=np.int64)

    def tokens_of(self, ids):
        rev = {i: t for t, i in self.vocab.items()}
        return [rev[int(i)] for i in ids]

    def vocab_tokens(self):
        return [t for t, _ in sorted(self.vocab.items(), key=lambda kv: kv[1])]

    def vocab_hash(self):
        joined = "\x00".join(self.vocab_tokens())
        return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def build_vocab(record_sets):
    """Deterministic vocabulary: specials first, then sorted unique tokens."""
    seen = set()
    for records in record_sets:
        for rec in records:
            seen.update(rec.tokens)
    return [PAD_TOKEN, UNK_TOKEN] + sorted(seen)


def load_embeddings(vector_file, vocab_tokens, dim_w, seed=1):
    """Build an EmbeddingStore from a text vector file.

    File format: one token per line followed by dim_w decimal floats,
    space-separated. In-vocabulary tokens take their file vectors;
    out-of-vocabulary tokens are sampled from U(-0.25, 0.25) with the
    run's seed; the pad row stays zero.
    """
    wanted = set(vocab_tokens)
    file_vectors = {}
    with open(vector_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            token = parts[0]
            if token not in wanted:
                continue
            vec = np.array(parts[1:], dtype=np.float64)
            if vec.shape[0] != dim_w:
                raise DatasetError(
                    f"{vector_file}:{lineno}: vector has {vec.shape[0]} dims, expected {dim_w}"
                )
            file_vectors[token] = vec
    rng = np.random.default_rng(seed)
    vocab = {t: i for i, t in enumerate(vocab_tokens)}
    matrix = np.zeros((len(vocab_tokens), dim_w), dtype=np.float64)
    for token, i in vocab.items():
        if token == PAD_TOKEN:
            continue
        if token in file_vectors:
            matrix[i] = file_vectors[token]
        else:
            matrix[i] = rng.uniform(-0.25, 0.25, size=dim_w)
    return EmbeddingStore(vocab=vocab, matrix=matrix)


def random_store(vocab_tokens, dim_w, seed=1):
    """Store with every non-pad row sampled from U(-0.25, 0.25)."""
    rng = np.random.default_rng(seed)
    vocab = {t: i for i, t in enumerate(vocab_tokens)}
    matrix = np.zeros((len(vocab_tokens), dim_w), dtype=np.float64)
    for token, i in vocab.items():
        if token != PAD_TOKEN:
            matrix[i] = rng.uniform(-0.25, 0.25, size=dim_w)
    return EmbeddingStore(vocab=vocab, matrix=matrix)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class PaddedExample:
    """Arrays for one record: padded ids, target ids, position weights."""

    token_ids: np.ndarray  # (pad_len,) int64, right-padded with pad_id
    target_ids: np.ndarray  # (m,) int64
    v: np.ndarray  # (pad_len,) float64
    n: int
    k: int
    m: int
    label_index: int


@dataclass
class Batch:
    examples: list
    records: list
    pad_len: int

    @property
    def token_ids(self):
        return np.stack([ex.token_ids for ex in self.examples])


def pad_batch(records, pad_len, store, C):
    """Right-pad each record's ids to pad_len and attach position weights.

    The position vector is zero exactly on padded positions, so no extra
    masking happens downstream.
    """
    examples = []
    for rec in records:
        if rec.n > pad_len:
            raise ValueError(f"sentence of {rec.n} tokens exceeds pad_len {pad_len}")
        ids = np.full(pad_len, store.pad_id, dtype=np.int64)
        ids[: rec.n] = store.ids(rec.tokens)
        weights = position_relevance(rec.target_start, rec.target_len, rec.n, pad_len, C)
        examples.append(
            PaddedExample(
                token_ids=ids,
                target_ids=store.ids(rec.target_tokens),
                v=weights.v,
                n=rec.n,
                k=rec.target_start,
                m=rec.target_len,
                label_index=LABEL_TO_INDEX[rec.label],
            )
        )
    return Batch(examples=examples, records=list(records), pad_len=pad_len)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def accuracy(preds, golds):
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(golds)} golds")
    if not preds:
        raise ValueError("cannot score an empty prediction list")
    return sum(p == g for p, g in zip(preds, golds)) / len(preds)


def confusion_matrix(preds, golds):
    """3x3 counts: rows are gold labels, columns predictions, order (P, N, O)."""
    if len(preds) != len(golds) or not preds:
        raise ValueError("need equal-length, non-empty prediction/gold lists")
    mat = np.zeros((3, 3), dtype=np.int64)
    for p, g in zip(preds, golds):
        mat[LABEL_TO_INDEX[g], LABEL_TO_INDEX[p]] += 1
    return mat


def _per_class_scores(mat):
    scores = {}
    for i, label in enumerate(LABELS):
        tp = mat[i, i]
        fp = mat[:, i].sum() - tp
        fn = mat[i, :].sum() - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores[label] = {"precision": float(precision), "recall": float(recall), "f1": float(f1)}
    return scores


def macro_f1(preds, golds):
    """Unweighted mean of the three per-class F1 scores.

    A class absent from both predictions and golds contributes 0 (stated
    convention, keeps the metric conservative on tiny fixtures).
    """
    mat = confusion_matrix(preds, golds)
    scores = _per_class_scores(mat)
    return sum(scores[label]["f1"] for label in LABELS) / len(LABELS)


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    per_class: dict
    confusion: list
    ttest: Optional[dict] = None

    def to_dict(self):
        out = {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class": self.per_class,
            "confusion": self.confusion,
        }
        if self.ttest is not None:
            out["ttest"] = self.ttest
        return out


def eval_report(preds, golds):
    mat = confusion_matrix(preds, golds)
    return EvalReport(
        accuracy=accuracy(preds, golds),
        macro_f1=macro_f1(preds, golds),
        per_class=_per_class_scores(mat),
        confusion=mat.tolist(),
    )


def paired_t_test(scores_a, scores_b):
    """Two-sided paired t-test on per-run score differences.

    Returns (t, p) with p from the Student-t survival function at
    len-1 degrees of freedom. Zero variance of the differences (all
    identical) is degenerate and raises.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need two equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("need at least two paired scores")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateInputError("score differences have zero variance")
    t = d.mean() / (sd / np.sqrt(d.size))
    p = 2.0 * stats.t.sf(abs(t), df=d.size - 1)
    return float(t), float(p)
