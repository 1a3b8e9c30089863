"""Dense-tensor reverse-mode automatic differentiation.

A deliberately small engine: float64 numpy arrays wrapped in graph nodes,
with exactly the primitives the sentiment model needs (affine maps, gated
recurrences, row softmax, convolution windows, max pooling) plus a central
finite-difference oracle for validating the analytic gradients.

Design notes:
  * everything is double precision; gradient-check tolerances assume it
  * backward visits nodes in reverse construction order, so gradient
    accumulation is deterministic and runs are bit-reproducible per seed
  * ReLU's subgradient at exactly 0 is taken to be 0
  * softmax/log-softmax subtract the row max before exponentiating
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's contract."""

    def __init__(self, primitive, message):
        super().__init__(f"{primitive}: {message}")
        self.primitive = primitive


class OracleError(RuntimeError):
    """The finite-difference oracle detected it cannot trust its inputs."""


_state = threading.local()


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction (forward values only) inside the block."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


_next_id = itertools.count()


class Tensor:
    """A float64 value grid plus its slot in the computation graph.

    ``data`` is always a C-contiguous float64 ndarray. ``grad`` is filled
    in by :meth:`backward` for nodes with ``requires_grad``. Gradients of
    every node reachable from the loss are reset at the start of each
    backward pass, then accumulated (summed) over all paths.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, op="leaf", parents=()):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward = None
        self._id = next(_next_id)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # convenience operators; the module-level functions are the primary API
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Reverse-mode pass from a scalar node.

        Zeroes the gradient of every node in the reachable subgraph, seeds
        d(loss)/d(loss) = 1, then applies the chain rule in reverse
        topological order (ties broken by construction order).
        """
        if self.data.shape != ():
            raise ValueError(
                f"backward requires a scalar loss node, got shape {self.data.shape}"
            )
        topo = _toposort(self)
        for node in topo:
            node.grad = None
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()


def _toposort(root):
    """Iterative DFS postorder; recursion would overflow on long recurrences."""
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, ready = stack.pop()
        if ready:
            topo.append(node)
            continue
        if node._id in visited:
            continue
        visited.add(node._id)
        stack.append((node, True))
        for parent in node._parents:
            if parent._id not in visited:
                stack.append((parent, False))
    return topo


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors):
    return grad_enabled() and any(t.requires_grad for t in tensors)


def _make(data, op, parents, backward):
    """Build a graph node; skips bookkeeping entirely when untracked."""
    if not _tracked(*parents):
        return Tensor(data, op=op)
    out = Tensor(data, requires_grad=True, op=op, parents=parents)
    out._backward = backward(out)
    return out


def _accumulate(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("add", f"cannot broadcast {a.shape} with {b.shape}") from None
    data = a.data + b.data

    def backward(out):
        def run():
            _accumulate(a, _unbroadcast(out.grad, a.shape))
            _accumulate(b, _unbroadcast(out.grad, b.shape))

        return run

    return _make(data, "add", (a, b), backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("sub", f"cannot broadcast {a.shape} with {b.shape}") from None
    data = a.data - b.data

    def backward(out):
        def run():
            _accumulate(a, _unbroadcast(out.grad, a.shape))
            _accumulate(b, _unbroadcast(-out.grad, b.shape))

        return run

    return _make(data, "sub", (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("mul", f"cannot broadcast {a.shape} with {b.shape}") from None
    data = a.data * b.data

    def backward(out):
        def run():
            _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
            _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

        return run

    return _make(data, "mul", (a, b), backward)


def neg(a):
    a = _wrap(a)

    def backward(out):
        def run():
            _accumulate(a, -out.grad)

        return run

    return _make(-a.data, "neg", (a,), backward)


def matmul(a, b):
    """Matrix product for the three cases the model uses.

    (m,k)@(k,n) -> (m,n);  (m,k)@(k,) -> (m,);  (k,)@(k,) -> scalar dot.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def backward(out):
            def run():
                _accumulate(a, out.grad @ b.data.T)
                _accumulate(b, a.data.T @ out.grad)

            return run

    elif a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def backward(out):
            def run():
                _accumulate(a, np.outer(out.grad, b.data))
                _accumulate(b, a.data.T @ out.grad)

            return run

    elif a.ndim == 1 and b.ndim == 1:
        if a.shape[0] != b.shape[0]:
            raise ShapeError("matmul", f"dot of unequal lengths: {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def backward(out):
            def run():
                _accumulate(a, out.grad * b.data)
                _accumulate(b, out.grad * a.data)

            return run

    else:
        raise ShapeError("matmul", f"unsupported ranks: {a.shape} @ {b.shape}")
    return _make(data, "matmul", (a, b), backward)


def transpose(a):
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError("transpose", f"needs a matrix, got {a.shape}")

    def backward(out):
        def run():
            _accumulate(a, out.grad.T)

        return run

    return _make(a.data.T, "transpose", (a,), backward)


def reshape(a, shape):
    a = _wrap(a)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError("reshape", f"cannot view {a.shape} as {tuple(shape)}")
    orig = a.shape

    def backward(out):
        def run():
            _accumulate(a, out.grad.reshape(orig))

        return run

    return _make(a.data.reshape(shape), "reshape", (a,), backward)


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------


def concat(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat", "needs at least one input")
    if axis not in (0, 1):
        raise ShapeError("concat", f"axis must be 0 or 1, got {axis}")
    if any(p.ndim != parts[0].ndim for p in parts):
        raise ShapeError("concat", f"mixed ranks: {[p.shape for p in parts]}")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", f"shapes do not align: {[p.shape for p in parts]}") from None
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(out):
        def run():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if axis == 0:
                    _accumulate(p, out.grad[lo:hi])
                else:
                    _accumulate(p, out.grad[:, lo:hi])

        return run

    return _make(data, "concat", tuple(parts), backward)


def stack_rows(vectors):
    vectors = [_wrap(v) for v in vectors]
    if not vectors:
        raise ShapeError("stack_rows", "needs at least one vector")
    if any(v.ndim != 1 or v.shape != vectors[0].shape for v in vectors):
        raise ShapeError("stack_rows", f"need equal-length vectors: {[v.shape for v in vectors]}")
    data = np.stack([v.data for v in vectors])

    def backward(out):
        def run():
            for i, v in enumerate(vectors):
                _accumulate(v, out.grad[i])

        return run

    return _make(data, "stack_rows", tuple(vectors), backward)


def narrow(a, start, stop):
    """Slice [start:stop) along axis 0 of a vector or matrix."""
    a = _wrap(a)
    if a.ndim not in (1, 2):
        raise ShapeError("narrow", f"needs rank 1 or 2, got {a.shape}")
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeError("narrow", f"range [{start}, {stop}) invalid for {a.shape}")

    def backward(out):
        def run():
            g = np.zeros_like(a.data)
            g[start:stop] = out.grad
            _accumulate(a, g)

        return run

    return _make(a.data[start:stop], "narrow", (a,), backward)


def row(a, i):
    a = _wrap(a)
    if a.ndim != 2 or not (0 <= i < a.shape[0]):
        raise ShapeError("row", f"row {i} invalid for {a.shape}")

    def backward(out):
        def run():
            g = np.zeros_like(a.data)
            g[i] = out.grad
            _accumulate(a, g)

        return run

    return _make(a.data[i], "row", (a,), backward)


def rows(a, indices):
    """Gather rows by index (embedding lookup); backward scatter-adds."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim != 2:
        raise ShapeError("rows", f"needs a matrix, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("rows", f"index out of range for {a.shape}")

    def backward(out):
        def run():
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _accumulate(a, g)

        return run

    return _make(a.data[idx], "rows", (a,), backward)


def pick(a, i):
    """Select one component of a vector as a scalar node."""
    a = _wrap(a)
    if a.ndim != 1 or not (0 <= i < a.shape[0]):
        raise ShapeError("pick", f"index {i} invalid for {a.shape}")

    def backward(out):
        def run():
            g = np.zeros_like(a.data)
            g[i] = out.grad
            _accumulate(a, g)

        return run

    return _make(a.data[i], "pick", (a,), backward)


def tensor_sum(a):
    a = _wrap(a)

    def backward(out):
        def run():
            _accumulate(a, np.full_like(a.data, out.grad))

        return run

    return _make(a.data.sum(), "sum", (a,), backward)


def mean_rows(a):
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError("mean_rows", f"needs a matrix, got {a.shape}")
    n = a.shape[0]

    def backward(out):
        def run():
            _accumulate(a, np.tile(out.grad / n, (n, 1)))

        return run

    return _make(a.data.mean(axis=0), "mean_rows", (a,), backward)


def repeat_rows(v, n):
    v = _wrap(v)
    if v.ndim != 1:
        raise ShapeError("repeat_rows", f"needs a vector, got {v.shape}")
    if n < 1:
        raise ShapeError("repeat_rows", f"row count must be >= 1, got {n}")

    def backward(out):
        def run():
            _accumulate(v, out.grad.sum(axis=0))

        return run

    return _make(np.tile(v.data, (n, 1)), "repeat_rows", (v,), backward)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(a):
    a = _wrap(a)
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(out):
        def run():
            _accumulate(a, out.grad * data * (1.0 - data))

        return run

    return _make(data, "sigmoid", (a,), backward)


def tanh(a):
    a = _wrap(a)
    data = np.tanh(a.data)

    def backward(out):
        def run():
            _accumulate(a, out.grad * (1.0 - data * data))

        return run

    return _make(data, "tanh", (a,), backward)


def relu(a):
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def backward(out):
        def run():
            # subgradient at 0 is 0 by convention
            _accumulate(a, out.grad * (a.data > 0.0))

        return run

    return _make(data, "relu", (a,), backward)


def log(a):
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: inputs must be strictly positive")
    data = np.log(a.data)

    def backward(out):
        def run():
            _accumulate(a, out.grad / a.data)

        return run

    return _make(data, "log", (a,), backward)


def softmax(a):
    """Softmax along the last axis, computed with max subtraction."""
    a = _wrap(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(out):
        def run():
            g = out.grad
            inner = (g * data).sum(axis=-1, keepdims=True)
            _accumulate(a, data * (g - inner))

        return run

    return _make(data, "softmax", (a,), backward)


def log_softmax(a):
    """log(softmax) along the last axis via the log-sum-exp guard."""
    a = _wrap(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(out):
        def run():
            g = out.grad
            _accumulate(a, g - soft * g.sum(axis=-1, keepdims=True))

        return run

    return _make(data, "log_softmax", (a,), backward)


def rowwise_max(a):
    """Per-row maximum of a matrix.

    Returns (values, argmax) where argmax is a plain int array; ties break
    to the lowest column index and the gradient is routed only to the
    argmax entry of each row.
    """
    a = _wrap(a)
    if a.ndim != 2 or a.shape[1] == 0:
        raise ShapeError("rowwise_max", f"needs a non-empty matrix, got {a.shape}")
    argmax = a.data.argmax(axis=1)
    data = a.data[np.arange(a.shape[0]), argmax]

    def backward(out):
        def run():
            g = np.zeros_like(a.data)
            g[np.arange(a.shape[0]), argmax] = out.grad
            _accumulate(a, g)

        return run

    return _make(data, "rowwise_max", (a,), backward), argmax


def dropout_mask(a, rate, rng):
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    a = _wrap(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def backward(out):
        def run():
            _accumulate(a, out.grad * keep)

        return run

    return _make(a.data * keep, "dropout", (a,), backward)


# ---------------------------------------------------------------------------
# generic dispatch + oracles
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "stack_rows": stack_rows,
    "narrow": narrow,
    "row": row,
    "rows": rows,
    "pick": pick,
    "sum": tensor_sum,
    "mean_rows": mean_rows,
    "repeat_rows": repeat_rows,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "log": log,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "rowwise_max": rowwise_max,
}


def primitive_forward(tag, inputs, **kwargs):
    """Apply a primitive by name to a list of inputs (test/dispatch surface)."""
    if tag not in PRIMITIVES:
        raise KeyError(f"unknown primitive {tag!r}")
    fn = PRIMITIVES[tag]
    if tag in ("concat", "stack_rows"):
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


def backward(loss, params=None):
    """Run a backward pass and optionally collect named gradients.

    ``loss`` must be a scalar node. When ``params`` maps names to leaf
    tensors, returns a dict of gradient arrays shaped like each parameter
    (zeros for parameters the loss does not reach).
    """
    loss.backward()
    if params is None:
        return None
    out = {}
    for name, p in params.items():
        out[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
    return out


def _loss_value(loss_fn):
    out = loss_fn()
    if isinstance(out, Tensor):
        return float(out.data)
    return float(out)


def finite_difference_gradient(loss_fn, params, epsilon=1e-5):
    """Central-difference gradients (f(x+e) - f(x-e)) / 2e per scalar.

    ``loss_fn`` must be deterministic (dropout off, fixed inputs); this is
    verified by evaluating it twice at the unperturbed point. Parameter
    values are perturbed in place and restored exactly.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    with no_grad():
        first = _loss_value(loss_fn)
        second = _loss_value(loss_fn)
        if first != second:
            raise OracleError(
                "loss_fn is not deterministic: two evaluations at the same "
                f"point gave {first!r} and {second!r}"
            )
        grads = {}
        for name, p in params.items():
            flat = p.data.reshape(-1)
            g = np.zeros_like(flat)
            for j in range(flat.size):
                saved = flat[j]
                flat[j] = saved + epsilon
                f_plus = _loss_value(loss_fn)
                flat[j] = saved - epsilon
                f_minus = _loss_value(loss_fn)
                flat[j] = saved
                g[j] = (f_plus - f_minus) / (2.0 * epsilon)
            grads[name] = g.reshape(p.data.shape)
    return grads


def relative_error(analytic, numeric, floor=1e-7):
    """Elementwise |a - n| / max(|a|, |n|), zeroed when |a - n| <= floor.

    The floor absorbs finite-difference rounding noise on near-zero
    gradients, where the relative measure is meaningless.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(diff <= floor, 0.0, diff / denom)
    return rel


def gradient_check(loss_fn, params, epsilon=1e-5, rel_tol=1e-4, corrupt=None):
    """Compare backward gradients against the finite-difference oracle.

    Returns (passed, per-parameter max relative error). ``corrupt`` names a
    parameter whose analytic gradient is deliberately perturbed; it exists
    as a negative-control hook for tests and must cause a failure.
    """
    loss = loss_fn()
    if not isinstance(loss, Tensor):
        raise TypeError("loss_fn must return a Tensor for the analytic pass")
    analytic = backward(loss, params)
    if corrupt is not None:
        analytic[corrupt] = analytic[corrupt] + 0.05 * (1.0 + np.abs(analytic[corrupt]))
    numeric = finite_difference_gradient(loss_fn, params, epsilon=epsilon)
    report = {}
    for name in params:
        report[name] = float(relative_error(analytic[name], numeric[name]).max())
    passed = all(err < rel_tol for err in report.values())
    return passed, report
