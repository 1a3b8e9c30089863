"""Position relevance, convolutional feature extraction and the classifier.

Position weights are plain constants (no gradient flows through them);
everything else is differentiable. Kernel windows slide over the full
padded sequence, so extracted n-grams may include padding tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class PositionWeights:
    """Relevance of each padded position to the target span.

    v[i] is in [0, 1]; positions past the true sentence length get 0, and
    raw values that would go negative (target further from a word than C)
    are clamped to 0.
    """

    v: np.ndarray
    k: int
    m: int
    n: int
    C: float


def position_relevance(k, m, n, padded_len, C):
    """Three-case proximity weight per 1-based position i.

    i <  k+m       -> 1 - (k+m-i)/C
    k+m <= i <= n  -> 1 - (i-k)/C
    i >  n         -> 0
    """
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    if not (1 <= k and m >= 1 and k + m - 1 <= n <= padded_len):
        raise ValueError(
            f"target span (k={k}, m={m}) must lie inside the sentence "
            f"(n={n}, padded_len={padded_len})"
        )
    v = np.zeros(padded_len, dtype=np.float64)
    for idx in range(padded_len):
        i = idx + 1
        if i > n:
            continue
        if i < k + m:
            raw = 1.0 - (k + m - i) / C
        else:
            raw = 1.0 - (i - k) / C
        v[idx] = max(raw, 0.0)
    return PositionWeights(v=v, k=k, m=m, n=n, C=float(C))


def apply_position(h, weights):
    """Scale row i of h by v_i."""
    v = weights.v if isinstance(weights, PositionWeights) else np.asarray(weights, dtype=np.float64)
    if h.shape[0] != v.shape[0]:
        raise ag.ShapeError("apply_position", f"{h.shape[0]} rows vs {v.shape[0]} weights")
    return ag.mul(h, Tensor(v.reshape(-1, 1)))


@dataclass
class ConvParams:
    """n_k kernels of size s over width-2h rows: W (n_k, s*2h), b (n_k,)."""

    W: Tensor
    b: Tensor
    s: int

    @property
    def n_kernels(self):
        return self.W.shape[0]

    def validate(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"conv shapes inconsistent: W {self.W.shape}, b {self.b.shape}")
        if self.s < 1 or self.W.shape[1] % self.s != 0:
            raise ValueError(f"kernel width {self.W.shape[1]} not divisible by s={self.s}")


def init_conv_params(n_kernels, s, dim_2h, rng):
    W = Tensor(rng.uniform(-0.01, 0.01, size=(n_kernels, s * dim_2h)), requires_grad=True)
    b = Tensor(np.zeros(n_kernels), requires_grad=True)
    return ConvParams(W, b, s)


def convolve(h_hat, params):
    """ReLU feature maps, one row per kernel, one column per window.

    c[f][i] = ReLU(kernel_f . concat(rows i..i+s-1) + bias_f), sliding the
    window over the whole padded sequence.
    """
    params.validate()
    padded_len = h_hat.shape[0]
    s = params.s
    if padded_len < s:
        raise ag.ShapeError(
            "convolve", f"sequence of {padded_len} rows shorter than kernel size {s}"
        )
    if params.W.shape[1] != s * h_hat.shape[1]:
        raise ag.ShapeError(
            "convolve", f"kernel width {params.W.shape[1]} vs window {s}*{h_hat.shape[1]}"
        )
    n_win = padded_len - s + 1
    windows = ag.concat([ag.narrow(h_hat, off, off + n_win) for off in range(s)], axis=1)
    maps = ag.relu(ag.add(ag.matmul(windows, ag.transpose(params.W)), params.b))
    return ag.transpose(maps)  # (n_k, n_win)


def max_pool(feature_maps):
    """Strongest response per kernel plus the window index that produced it.

    Ties break to the lowest window index so the reported n-gram is
    deterministic.
    """
    return ag.rowwise_max(feature_maps)


@dataclass
class ClassifierParams:
    """Final affine map to the three sentiment classes, ordered (P, N, O)."""

    W: Tensor
    b: Tensor

    def validate(self):
        if self.W.ndim != 2 or self.W.shape[0] != 3 or self.b.shape != (3,):
            raise ValueError(f"classifier shapes invalid: W {self.W.shape}, b {self.b.shape}")


def init_classifier_params(n_features, rng):
    W = Tensor(rng.uniform(-0.01, 0.01, size=(3, n_features)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    return ClassifierParams(W, b)


def class_logits(z, params):
    params.validate()
    if z.shape != (params.W.shape[1],):
        raise ag.ShapeError("class_logits", f"features {z.shape} vs W {params.W.shape}")
    return ag.add(ag.matmul(params.W, z), params.b)


def classify(z, params):
    """Probability distribution over (P, N, O); argmax is the prediction,
    with ties broken by class order."""
    return ag.softmax(class_logits(z, params))


@dataclass
class NgramReport:
    """Most informative window for one prediction.

    The window surviving max pooling most often across kernels wins; ties
    go to the lowest window index. ``start`` is 1-based.
    """

    kernel: int
    start: int
    tokens: list

    def to_dict(self):
        return {"kernel": self.kernel, "start": self.start, "tokens": list(self.tokens)}


def most_informative_ngram(argmax_windows, tokens, s, pad_token="<pad>"):
    """Pick the modal argmax window and spell out its s tokens."""
    argmax_windows = np.asarray(argmax_windows, dtype=np.int64)
    counts = np.bincount(argmax_windows)
    best = int(counts.argmax())  # argmax breaks ties toward the lowest index
    kernel = int(np.nonzero(argmax_windows == best)[0][0])
    window = [tokens[i] if i < len(tokens) else pad_token for i in range(best, best + s)]
    return NgramReport(kernel=kernel, start=best + 1, tokens=window)
