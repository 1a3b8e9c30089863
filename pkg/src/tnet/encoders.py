"""LSTM cell and bi-directional encoders for sentence and target words.

Gate order inside the stacked weight matrices is (input, forget,
candidate, output). Initial hidden and cell states are zero vectors, and
the backward direction runs right-to-left over the full (padded) sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class LstmParams:
    """One direction's weights: W_x (4h x d), W_h (4h x h), b (4h,)."""

    W_x: Tensor
    W_h: Tensor
    b: Tensor

    @property
    def dim_h(self):
        return self.W_h.shape[1]

    @property
    def input_dim(self):
        return self.W_x.shape[1]

    def validate(self):
        h = self.dim_h
        if self.W_x.shape[0] != 4 * h or self.W_h.shape != (4 * h, h) or self.b.shape != (4 * h,):
            raise ValueError(
                f"inconsistent LSTM shapes: W_x {self.W_x.shape}, "
                f"W_h {self.W_h.shape}, b {self.b.shape}"
            )


@dataclass
class BiLstmParams:
    fwd: LstmParams
    bwd: LstmParams

    @property
    def dim_h(self):
        if self.fwd.dim_h != self.bwd.dim_h:
            raise ValueError("forward/backward directions must share dim_h")
        return self.fwd.dim_h


def init_lstm_params(input_dim, dim_h, rng):
    """Weights ~ U(-0.01, 0.01), biases zero."""
    W_x = Tensor(rng.uniform(-0.01, 0.01, size=(4 * dim_h, input_dim)), requires_grad=True)
    W_h = Tensor(rng.uniform(-0.01, 0.01, size=(4 * dim_h, dim_h)), requires_grad=True)
    b = Tensor(np.zeros(4 * dim_h), requires_grad=True)
    return LstmParams(W_x, W_h, b)


def init_bilstm_params(input_dim, dim_h, rng):
    return BiLstmParams(
        fwd=init_lstm_params(input_dim, dim_h, rng),
        bwd=init_lstm_params(input_dim, dim_h, rng),
    )


def lstm_step(x_t, h_prev, c_prev, params):
    """One gated recurrence step; returns (h_t, c_t).

    c_t = i * c_hat + f * c_prev; h_t = tanh(c_t) * o, so every component
    of h_t lies in (-1, 1).
    """
    h = params.dim_h
    if x_t.shape != (params.input_dim,):
        raise ag.ShapeError("lstm_step", f"input {x_t.shape} != ({params.input_dim},)")
    if h_prev.shape != (h,) or c_prev.shape != (h,):
        raise ag.ShapeError("lstm_step", f"state {h_prev.shape}/{c_prev.shape} != ({h},)")
    gates = ag.add(ag.add(ag.matmul(params.W_x, x_t), ag.matmul(params.W_h, h_prev)), params.b)
    i = ag.sigmoid(ag.narrow(gates, 0, h))
    f = ag.sigmoid(ag.narrow(gates, h, 2 * h))
    c_hat = ag.tanh(ag.narrow(gates, 2 * h, 3 * h))
    o = ag.sigmoid(ag.narrow(gates, 3 * h, 4 * h))
    c_t = ag.add(ag.mul(i, c_hat), ag.mul(f, c_prev))
    h_t = ag.mul(ag.tanh(c_t), o)
    return h_t, c_t


def _run_direction(x, params, reverse):
    n = x.shape[0]
    h = Tensor(np.zeros(params.dim_h))
    c = Tensor(np.zeros(params.dim_h))
    order = range(n - 1, -1, -1) if reverse else range(n)
    states = [None] * n
    for t in order:
        h, c = lstm_step(ag.row(x, t), h, c, params)
        states[t] = h
    return states


def _encode(x, params, what):
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"{what}: need a non-empty (length x dim) input, got shape {x.shape}")
    fwd = _run_direction(x, params.fwd, reverse=False)
    bwd = _run_direction(x, params.bwd, reverse=True)
    return ag.concat([ag.stack_rows(fwd), ag.stack_rows(bwd)], axis=1)


def encode_sentence(x, params):
    """Contextualize each word: row i is [fwd state at i ; bwd state at i]."""
    return _encode(x, params, "encode_sentence")


def encode_target(x_tau, params):
    """Same contract as encode_sentence, applied to the target sub-sequence."""
    return _encode(x_tau, params, "encode_target")
