"""Context-preserving transformation stack.

Each layer tailor-makes a target representation per sentence word
(softmax-weighted mix of target-word states against that word), feeds the
concatenation through a fully-connected transform, and re-injects the
pre-transform features either additively (lossless forwarding) or through
a learned gate (adaptive scaling). One parameter set is shared across all
layers unless per-layer parameters are requested explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

STRATEGIES = ("lf", "as", "none")
TRANSFORMS = ("tst", "fc", "identity")

_ACTIVATIONS = {"tanh": ag.tanh, "relu": ag.relu, "sigmoid": ag.sigmoid}


@dataclass
class TstParams:
    """Transform weights: W (2h x 4h), b (2h,), plus the activation tag.

    The output width equals the input width 2h so that the residual /
    gated combinations downstream stay well-formed.
    """

    W: Tensor
    b: Tensor
    activation: str = "tanh"

    def validate(self):
        d = self.b.shape[0]
        if self.W.shape != (d, 2 * d):
            raise ValueError(f"transform must map 2*{d} -> {d}, got W {self.W.shape}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class GateParams:
    """Adaptive-scaling gate: W (2h x 2h), b (2h,)."""

    W: Tensor
    b: Tensor

    def validate(self):
        d = self.b.shape[0]
        if self.W.shape != (d, d):
            raise ValueError(f"gate must be square in {d}, got W {self.W.shape}")


@dataclass
class CptConfig:
    """Stack shape: layer count, combination strategy, transform kind."""

    num_layers: int = 2
    strategy: str = "lf"
    transform: str = "tst"
    apply_position_per_layer: bool = True

    def validate(self):
        if self.num_layers < 1:
            raise ValueError(f"layer count must be >= 1, got {self.num_layers}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"transform must be one of {TRANSFORMS}, got {self.transform!r}")


@dataclass
class CptParams:
    """Per-stack parameters; lists hold one entry when shared across layers."""

    tst_layers: list = field(default_factory=list)
    gate_layers: list = field(default_factory=list)

    def tst_for(self, layer):
        return self.tst_layers[layer % len(self.tst_layers)] if len(self.tst_layers) > 1 else self.tst_layers[0]

    def gate_for(self, layer):
        return self.gate_layers[layer % len(self.gate_layers)] if len(self.gate_layers) > 1 else self.gate_layers[0]


def init_tst_params(dim_2h, rng, activation="tanh"):
    W = Tensor(rng.uniform(-0.01, 0.01, size=(dim_2h, 2 * dim_2h)), requires_grad=True)
    b = Tensor(np.zeros(dim_2h), requires_grad=True)
    return TstParams(W, b, activation)


def init_gate_params(dim_2h, rng):
    W = Tensor(rng.uniform(-0.01, 0.01, size=(dim_2h, dim_2h)), requires_grad=True)
    b = Tensor(np.zeros(dim_2h), requires_grad=True)
    return GateParams(W, b)


# ---------------------------------------------------------------------------
# per-word operations (the contract surface; the stack uses the batched forms)
# ---------------------------------------------------------------------------


def target_attention(h_i, h_tau):
    """Relatedness of each target word to one sentence word.

    weights_j = exp(h_i . h_tau_j) / sum_k exp(h_i . h_tau_k): a strictly
    positive distribution over the target words.
    """
    if h_tau.ndim != 2 or h_tau.shape[0] < 1:
        raise ag.ShapeError("target_attention", f"target matrix invalid: {h_tau.shape}")
    return ag.softmax(ag.matmul(h_tau, h_i))


def tailor_target(h_i, h_tau):
    """Target representation conditioned on one word: a convex mix of target rows."""
    weights = target_attention(h_i, h_tau)
    return ag.matmul(ag.transpose(h_tau), weights)


def _transform(h_i, r, params):
    params.validate()
    act = _ACTIVATIONS[params.activation]
    return act(ag.add(ag.matmul(params.W, ag.concat([h_i, r])), params.b))


def tst(h_i, h_tau, params):
    """Target-specific transformation of one word representation."""
    return _transform(h_i, tailor_target(h_i, h_tau), params)


def fc_transform(h_i, h_tau_mean, params):
    """Plain fully-connected alternative: the unweighted target mean stands in
    for the tailor-made representation."""
    return _transform(h_i, h_tau_mean, params)


def lossless_forward(h_l, h_tilde_l):
    """Additive context preservation: next = current + transformed."""
    if h_l.shape != h_tilde_l.shape:
        raise ag.ShapeError("lossless_forward", f"{h_l.shape} != {h_tilde_l.shape}")
    return ag.add(h_l, h_tilde_l)


def adaptive_scale(h_l, h_tilde_l, params):
    """Gated convex combination: t*transformed + (1-t)*current.

    The gate t = sigmoid(W h_l + b) is strictly inside (0, 1), so every
    output component lies between the corresponding inputs.
    """
    if h_l.shape != h_tilde_l.shape:
        raise ag.ShapeError("adaptive_scale", f"{h_l.shape} != {h_tilde_l.shape}")
    params.validate()
    t = ag.sigmoid(ag.add(ag.matmul(params.W, h_l), params.b))
    return ag.add(ag.mul(t, h_tilde_l), ag.mul(ag.sub(1.0, t), h_l))


# ---------------------------------------------------------------------------
# batched (whole-sentence) forms
# ---------------------------------------------------------------------------


def transform_matrix(h, h_tau, params, kind):
    """Apply the chosen transform to every sentence position at once.

    Row i of the result equals tst/fc_transform on row i; "identity"
    passes the input through (ablation hook).
    """
    if kind == "identity":
        return h
    if kind == "tst":
        scores = ag.matmul(h, ag.transpose(h_tau))  # (n, m)
        weights = ag.softmax(scores)
        r = ag.matmul(weights, h_tau)  # (n, 2h)
    elif kind == "fc":
        r = ag.repeat_rows(ag.mean_rows(h_tau), h.shape[0])
    else:
        raise ValueError(f"unknown transform kind {kind!r}")
    params.validate()
    act = _ACTIVATIONS[params.activation]
    pre = ag.add(ag.matmul(ag.concat([h, r], axis=1), ag.transpose(params.W)), params.b)
    return act(pre)


def combine_matrix(h, h_tilde, strategy, gate_params):
    if strategy == "lf":
        return ag.add(h, h_tilde)
    if strategy == "as":
        gate_params.validate()
        t = ag.sigmoid(ag.add(ag.matmul(h, ag.transpose(gate_params.W)), gate_params.b))
        return ag.add(ag.mul(t, h_tilde), ag.mul(ag.sub(1.0, t), h))
    if strategy == "none":
        return h_tilde
    raise ValueError(f"unknown strategy {strategy!r}")


def scale_positions(h, v):
    """Multiply row i by the constant position weight v_i."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (h.shape[0],):
        raise ag.ShapeError("scale_positions", f"weights {v.shape} vs rows {h.shape}")
    return ag.mul(h, Tensor(v.reshape(-1, 1)))


def cpt_stack(h0, h_tau, config, params, v=None):
    """Run the full transformation stack over a contextualized sentence.

    For each layer: transform per position, combine with the layer input
    per the strategy, then (optionally) scale every position by its
    relevance weight. ``v`` is a plain float array or None.
    """
    config.validate()
    h = h0
    for layer in range(config.num_layers):
        tst_p = params.tst_for(layer) if config.transform != "identity" else None
        h_tilde = transform_matrix(h, h_tau, tst_p, config.transform)
        gate_p = params.gate_for(layer) if config.strategy == "as" else None
        h = combine_matrix(h, h_tilde, config.strategy, gate_p)
        if v is not None and config.apply_position_per_layer:
            h = scale_positions(h, v)
    return h


def attention_reweight(h, h_tau):
    """Dot-attention alternative to the transformation stack.

    Scores each position against the mean target state, normalizes over
    the sentence, and scales each word representation by its weight. Needs
    no extra parameters and no context-preserving combination.
    """
    r = ag.mean_rows(h_tau)
    scores = ag.matmul(h, r)  # (n,)
    alpha = ag.softmax(scores)
    return ag.mul(h, ag.reshape(alpha, (h.shape[0], 1)))
