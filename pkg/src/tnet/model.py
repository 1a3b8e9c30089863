"""Full model assembly: embeddings -> BiLSTMs -> transformation -> CNN head.

A variant name picks the middle stage:

    tnet-lf / tnet-as          transformation stack with LF / AS combination
    lstm-fc-cnn-lf / -as       plain FC transform (mean target) with LF / AS
    lstm-att-cnn               dot-attention reweighting, no combination
    wo-transformation          no middle stage at all (position + CNN only)
    wo-context                 transformation without any combination
    wo-position-lf / -as       full stack, position weighting disabled

Every learnable tensor is addressable by name through named_params(), in a
fixed order, so gradient checks and checkpoints are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from . import cpt, encoders, head
from .autograd import Tensor
from .pipeline import LABELS, EmbeddingStore, PaddedExample

VARIANTS = {
    "tnet-lf": {"transform": "tst", "strategy": "lf", "position": True},
    "tnet-as": {"transform": "tst", "strategy": "as", "position": True},
    "lstm-fc-cnn-lf": {"transform": "fc", "strategy": "lf", "position": True},
    "lstm-fc-cnn-as": {"transform": "fc", "strategy": "as", "position": True},
    "lstm-att-cnn": {"transform": "att", "strategy": None, "position": True},
    "wo-transformation": {"transform": None, "strategy": None, "position": True},
    "wo-context": {"transform": "tst", "strategy": "none", "position": True},
    "wo-position-lf": {"transform": "tst", "strategy": "lf", "position": False},
    "wo-position-as": {"transform": "tst", "strategy": "as", "position": False},
}


@dataclass
class ModelFlags:
    share_target_encoder: bool = False
    per_layer_params: bool = False
    freeze_embeddings: bool = False
    scale_final_extra: bool = False

    def to_dict(self):
        return {
            "share_target_encoder": self.share_target_encoder,
            "per_layer_params": self.per_layer_params,
            "freeze_embeddings": self.freeze_embeddings,
            "scale_final_extra": self.scale_final_extra,
        }


@dataclass
class ForwardResult:
    logits: Tensor
    argmax_windows: np.ndarray

    @property
    def probabilities(self):
        return ag.softmax(self.logits)


class TnetModel:
    """Holds all parameters and runs per-example forward passes."""

    def __init__(self, store, hyper, variant="tnet-lf", flags=None, seed=None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        self.store = store
        self.hyper = hyper
        self.variant = variant
        self.spec = VARIANTS[variant]
        self.flags = flags or ModelFlags()
        seed = hyper.seed if seed is None else seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE5C0DE]))

        dim_2h = 2 * hyper.dim_h
        self.embedding = Tensor(store.matrix.copy(), requires_grad=not self.flags.freeze_embeddings)
        self.sent_encoder = encoders.init_bilstm_params(hyper.dim_w, hyper.dim_h, rng)
        if self.flags.share_target_encoder:
            self.target_encoder = self.sent_encoder
        else:
            self.target_encoder = encoders.init_bilstm_params(hyper.dim_w, hyper.dim_h, rng)

        self.cpt_params = cpt.CptParams()
        self.cpt_config = None
        if self.spec["transform"] in ("tst", "fc"):
            layers = hyper.L if self.flags.per_layer_params else 1
            self.cpt_params.tst_layers = [cpt.init_tst_params(dim_2h, rng) for _ in range(layers)]
            if self.spec["strategy"] == "as":
                self.cpt_params.gate_layers = [cpt.init_gate_params(dim_2h, rng) for _ in range(layers)]
            self.cpt_config = cpt.CptConfig(
                num_layers=hyper.L,
                strategy=self.spec["strategy"],
                transform=self.spec["transform"],
                apply_position_per_layer=self.spec["position"],
            )
        self.conv = head.init_conv_params(hyper.n_k, hyper.s, dim_2h, rng)
        self.classifier = head.init_classifier_params(hyper.n_k, rng)

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self):
        """Ordered name -> Tensor map of every trainable parameter."""
        out = {}
        if self.embedding.requires_grad:
            out["embedding"] = self.embedding
        for prefix, enc in self._encoders():
            for direction in ("fwd", "bwd"):
                p = getattr(enc, direction)
                out[f"{prefix}.{direction}.W_x"] = p.W_x
                out[f"{prefix}.{direction}.W_h"] = p.W_h
                out[f"{prefix}.{direction}.b"] = p.b
        for i, p in enumerate(self.cpt_params.tst_layers):
            tag = f"cpt.tst.{i}" if len(self.cpt_params.tst_layers) > 1 else "cpt.tst"
            out[f"{tag}.W"] = p.W
            out[f"{tag}.b"] = p.b
        for i, p in enumerate(self.cpt_params.gate_layers):
            tag = f"cpt.gate.{i}" if len(self.cpt_params.gate_layers) > 1 else "cpt.gate"
            out[f"{tag}.W"] = p.W
            out[f"{tag}.b"] = p.b
        out["conv.W"] = self.conv.W
        out["conv.b"] = self.conv.b
        out["clf.W"] = self.classifier.W
        out["clf.b"] = self.classifier.b
        return out

    def _encoders(self):
        if self.flags.share_target_encoder:
            return [("encoder", self.sent_encoder)]
        return [("sent_lstm", self.sent_encoder), ("target_lstm", self.target_encoder)]

    def buffers(self):
        """Non-trainable arrays that still belong in a checkpoint."""
        if self.embedding.requires_grad:
            return {}
        return {"embedding": self.embedding}

    def count_params(self):
        return sum(p.data.size for p in self.named_params().values())

    def mask_frozen_grads(self):
        """Zero the pad row's gradient so the zero pad vector never moves."""
        if self.embedding.requires_grad and self.embedding.grad is not None:
            self.embedding.grad[self.store.pad_id] = 0.0

    # -- forward --------------------------------------------------------------

    def forward_example(self, ex: PaddedExample, dropout_rng=None):
        """Logits for one padded example.

        ``dropout_rng`` not None selects training mode: inverted dropout on
        the encoder inputs and on the pooled sentence vector.
        """
        h = self.hyper
        x = ag.rows(self.embedding, ex.token_ids)
        x_tau = ag.rows(self.embedding, ex.target_ids)
        if dropout_rng is not None and h.p_lstm > 0:
            x = ag.dropout_mask(x, h.p_lstm, dropout_rng)
            x_tau = ag.dropout_mask(x_tau, h.p_lstm, dropout_rng)

        h_sent = encoders.encode_sentence(x, self.sent_encoder)
        h_tau = encoders.encode_target(x_tau, self.target_encoder)

        use_position = self.spec["position"]
        if self.cpt_config is not None:
            v = ex.v if use_position else None
            feats = cpt.cpt_stack(h_sent, h_tau, self.cpt_config, self.cpt_params, v=v)
            if use_position and self.flags.scale_final_extra:
                feats = cpt.scale_positions(feats, ex.v)
        elif self.spec["transform"] == "att":
            feats = cpt.attention_reweight(h_sent, h_tau)
            if use_position:
                feats = cpt.scale_positions(feats, ex.v)
        else:  # no middle stage
            feats = cpt.scale_positions(h_sent, ex.v) if use_position else h_sent

        maps = head.convolve(feats, self.conv)
        z, argmax_windows = head.max_pool(maps)
        if dropout_rng is not None and h.p_sent > 0:
            z = ag.dropout_mask(z, h.p_sent, dropout_rng)
        logits = head.class_logits(z, self.classifier)
        return ForwardResult(logits=logits, argmax_windows=argmax_windows)

    def loss_example(self, ex: PaddedExample, dropout_rng=None):
        result = self.forward_example(ex, dropout_rng=dropout_rng)
        return ag.neg(ag.pick(ag.log_softmax(result.logits), ex.label_index))

    def loss_batch(self, examples, dropout_rng=None):
        """Mean cross-entropy over a batch (single accumulation order)."""
        if not examples:
            raise ValueError("empty batch")
        total = self.loss_example(examples[0], dropout_rng=dropout_rng)
        for ex in examples[1:]:
            total = ag.add(total, self.loss_example(ex, dropout_rng=dropout_rng))
        return ag.mul(total, 1.0 / len(examples))

    def predict_example(self, ex: PaddedExample, tokens=None):
        """Evaluation-mode prediction with the most-informative n-gram."""
        with ag.no_grad():
            result = self.forward_example(ex)
            probs = result.probabilities.data
        label = LABELS[int(np.argmax(probs))]
        report = None
        if tokens is not None:
            report = head.most_informative_ngram(result.argmax_windows, tokens, self.hyper.s)
        return label, probs, report

    def predict_batch(self, batch):
        preds = []
        for ex in batch.examples:
            label, _, _ = self.predict_example(ex)
            preds.append(label)
        return preds

    # -- state I/O ------------------------------------------------------------

    def state_arrays(self):
        """All arrays that define the model, parameters first, in fixed order."""
        arrays = {name: p.data for name, p in self.named_params().items()}
        for name, buf in self.buffers().items():
            arrays[name] = buf.data
        return arrays

    def load_state_arrays(self, arrays):
        targets = dict(self.named_params())
        for name, buf in self.buffers().items():
            targets[name] = buf
        missing = set(targets) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint is missing arrays: {sorted(missing)}")
        for name, tensor in targets.items():
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"array {name!r} has shape {arr.shape}, expected {tensor.data.shape}"
                )
            tensor.data = arr
            tensor.grad = None
