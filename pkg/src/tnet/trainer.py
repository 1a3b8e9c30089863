"""Loss, optimizer, dropout policy, held-out splitting and the train loop.

Training is single-threaded and fully deterministic for a fixed seed: the
init / split / shuffle / dropout random streams are spawned from one seed
sequence, and gradient accumulation order is fixed by graph construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import ModelFlags, TnetModel
from .pipeline import EmbeddingStore, eval_report, pad_batch

CHECKPOINT_MAGIC = b"TNET-CHECKPOINT-V1\n"


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; message carries the batch id and param norms."""


@dataclass
class Hyperparams:
    """Model and training configuration (defaults match the LF setup)."""

    dim_w: int = 300
    dim_h: int = 50
    p_lstm: float = 0.3
    p_sent: float = 0.3
    L: int = 2
    batch_size: int = 64
    s: int = 3
    n_k: int = 50
    C: float = 40.0
    epochs: int = 100
    seed: int = 1

    def to_dict(self):
        return {
            "dim_w": self.dim_w, "dim_h": self.dim_h,
            "p_lstm": self.p_lstm, "p_sent": self.p_sent,
            "L": self.L, "batch_size": self.batch_size,
            "s": self.s, "n_k": self.n_k, "C": self.C,
            "epochs": self.epochs, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


_LF_FAMILY = {"n_k": 50, "C": 40.0}
_AS_FAMILY = {"n_k": 100, "C": 30.0}
_BATCH = {
    "lf": {"laptop": 64, "rest": 25, "twitter": 64},
    "as": {"laptop": 64, "rest": 32, "twitter": 64},
}


def table_defaults(variant, dataset):
    """Tuned hyperparameters keyed by (variant family, dataset name)."""
    family = "as" if variant.endswith("-as") or variant == "tnet-as" else "lf"
    if dataset not in _BATCH[family]:
        raise ValueError(f"unknown dataset {dataset!r}; choose from {sorted(_BATCH[family])}")
    values = dict(_AS_FAMILY if family == "as" else _LF_FAMILY)
    values["batch_size"] = _BATCH[family][dataset]
    return values


@dataclass
class RunHistory:
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    val_macro_f1: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_dict(self):
        return {
            "train_loss": self.train_loss,
            "val_accuracy": self.val_accuracy,
            "val_macro_f1": self.val_macro_f1,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }


# ---------------------------------------------------------------------------
# loss / regularization / optimizer
# ---------------------------------------------------------------------------


def cross_entropy(probs, gold_index):
    """-log p(gold) for an explicit probability distribution.

    The training path works from logits through log-softmax instead (see
    TnetModel.loss_example), which is the log-sum-exp guarded form of the
    same quantity; this surface exists for scoring given distributions.
    """
    p = probs if isinstance(probs, Tensor) else Tensor(probs)
    if p.ndim != 1:
        raise ValueError(f"need a probability vector, got shape {p.shape}")
    return ag.neg(ag.log(ag.pick(p, gold_index)))


def apply_dropout(tensor, rate, mode, rng=None):
    """Inverted dropout in "train" mode, identity in "eval" mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return tensor
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    return ag.dropout_mask(tensor, rate, rng)


class Adam:
    """Bias-corrected adaptive moments, default rates from the usual setup:
    lr 0.001, beta1 0.9, beta2 0.999, eps 1e-8."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1**t)
            v_hat = self.v[name] / (1.0 - self.beta2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params, grads, state):
    """Functional single step for a named parameter/gradient map.

    ``state`` is an Adam instance whose params are the same tensors; the
    gradients are installed and one update applied.
    """
    for name, g in grads.items():
        state.params[name].grad = np.asarray(g, dtype=np.float64)
    state.step()
    return {name: p.data for name, p in state.params.items()}


# ---------------------------------------------------------------------------
# data splitting and the loop
# ---------------------------------------------------------------------------


def heldout_split(records, fraction=0.2, seed=1):
    """Disjoint, exhaustive, seed-deterministic (train, validation) split."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    if len(records) < 5:
        raise ValueError(f"need at least 5 records to split, got {len(records)}")
    n_val = max(1, round(fraction * len(records)))
    if n_val >= len(records):
        n_val = len(records) - 1
    perm = np.random.default_rng(seed).permutation(len(records))
    val_idx = set(perm[:n_val].tolist())
    train = [rec for i, rec in enumerate(records) if i not in val_idx]
    val = [rec for i, rec in enumerate(records) if i in val_idx]
    return train, val


def _param_norms(params):
    return {name: float(np.linalg.norm(p.data)) for name, p in params.items()}


def train(
    records,
    store: EmbeddingStore,
    hyper: Hyperparams,
    variant="tnet-lf",
    flags: Optional[ModelFlags] = None,
    heldout_fraction=0.2,
    stop_at_accuracy=None,
    pad_len=None,
):
    """Train a model; returns (model with its best snapshot restored, history).

    ``heldout_fraction`` 0 validates on the training data itself (used for
    overfitting checks); otherwise a seed-deterministic split is held out.
    ``stop_at_accuracy`` stops as soon as the validation accuracy reaches
    the threshold. The returned model carries the parameters of the epoch
    with the best validation accuracy.
    """
    if not records:
        raise ValueError("empty training set")
    seeds = np.random.SeedSequence(hyper.seed).spawn(3)
    shuffle_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])
    split_seed = int(seeds[2].generate_state(1)[0])

    if heldout_fraction > 0:
        train_recs, val_recs = heldout_split(records, heldout_fraction, seed=split_seed)
    else:
        train_recs, val_recs = list(records), list(records)

    if pad_len is None:
        pad_len = max(max(r.n for r in records), hyper.s)
    train_batch = pad_batch(train_recs, pad_len, store, hyper.C)
    val_batch = pad_batch(val_recs, pad_len, store, hyper.C)

    model = TnetModel(store, hyper, variant=variant, flags=flags)
    params = model.named_params()
    optimizer = Adam(params)
    history = RunHistory()
    best_acc = -1.0
    best_state = None

    for epoch in range(hyper.epochs):
        order = shuffle_rng.permutation(len(train_batch.examples))
        epoch_loss = 0.0
        for batch_id, start in enumerate(range(0, len(order), hyper.batch_size)):
            chunk = [train_batch.examples[i] for i in order[start : start + hyper.batch_size]]
            loss = model.loss_batch(chunk, dropout_rng=dropout_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {batch_id}; "
                    f"parameter norms: {_param_norms(params)}"
                )
            loss.backward()
            model.mask_frozen_grads()
            optimizer.step()
            epoch_loss += value * len(chunk)
        history.train_loss.append(epoch_loss / len(train_batch.examples))

        preds = model.predict_batch(val_batch)
        golds = [rec.label for rec in val_batch.records]
        report = eval_report(preds, golds)
        history.val_accuracy.append(report.accuracy)
        history.val_macro_f1.append(report.macro_f1)
        if report.accuracy > best_acc:
            best_acc = report.accuracy
            history.best_epoch = epoch
            best_state = {name: arr.copy() for name, arr in model.state_arrays().items()}
        if stop_at_accuracy is not None and report.accuracy >= stop_at_accuracy:
            history.stopped_early = True
            break

    if best_state is not None:
        model.load_state_arrays(best_state)
    return model, history


def evaluate(model: TnetModel, records, store: EmbeddingStore, pad_len=None):
    """Eval-mode pass over a record list; returns (EvalReport, predictions)."""
    if pad_len is None:
        pad_len = max(max(r.n for r in records), model.hyper.s)
    batch = pad_batch(records, pad_len, store, model.hyper.C)
    preds = model.predict_batch(batch)
    golds = [rec.label for rec in records]
    return eval_report(preds, golds), preds


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Deterministic container: magic line, 8-byte little-endian header length,
# JSON header (sorted keys), then raw little-endian float64 blobs in header
# order. Byte-for-byte reproducible for identical state, unlike zip-based
# formats that embed timestamps.


def save_checkpoint(path, model: TnetModel, extra_meta=None):
    arrays = model.state_arrays()
    meta = {
        "format_version": 1,
        "variant": model.variant,
        "hyperparams": model.hyper.to_dict(),
        "flags": model.flags.to_dict(),
        "vocab": model.store.vocab_tokens(),
        "vocab_hash": model.store.vocab_hash(),
        "trainable": sorted(model.named_params().keys()),
    }
    if extra_meta:
        meta["extra"] = extra_meta
    header = {
        "meta": meta,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild the model a checkpoint was saved from. Returns (model, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    meta = header["meta"]
    vocab_tokens = meta["vocab"]
    store = EmbeddingStore(
        vocab={t: i for i, t in enumerate(vocab_tokens)},
        matrix=arrays["embedding"].copy(),
    )
    hyper = Hyperparams.from_dict(meta["hyperparams"])
    flags = ModelFlags(**meta["flags"])
    model = TnetModel(store, hyper, variant=meta["variant"], flags=flags)
    model.load_state_arrays(arrays)
    return model, meta
