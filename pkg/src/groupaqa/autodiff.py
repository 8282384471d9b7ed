"""Dense 2-D float64 matrices with reverse-mode differentiation.

The assessment pipeline needs only a small, fixed vocabulary of matrix
operations (products, sums, row softmax, relu, sigmoid, batch norm,
pooling, slicing).  Each op here carries a hand-written adjoint instead
of relying on a general autodiff framework, so every gradient can be
pinned against central finite differences in the test suite.

Values are immutable ``numpy`` arrays of shape ``(rows, cols)`` and dtype
float64.  A :class:`Node` ties a value to the tape that produced it; a
backward pass visits the tape in reverse topological order exactly once
and accumulates gradients into ``Node.grad``.  Tapes are cheap and are
rebuilt for every training step; they must stay confined to one thread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Node",
    "constant",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "log",
    "clip",
    "softmax_rows",
    "transpose",
    "mean_rows",
    "mean_all",
    "sum_all",
    "slice_rows",
    "slice_cols",
    "concat_rows",
    "concat_cols",
    "BatchNormState",
    "batch_norm",
    "backward",
    "GradientCheck",
    "check_gradients",
    "assert_gradients_close",
]


def _as_matrix(data) -> np.ndarray:
    """Coerce to an immutable C-order float64 matrix."""
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


class Node:
    """One vertex of a computation tape.

    ``value`` is the immutable matrix produced by ``op``; ``parents`` are
    the input nodes; ``grad`` is filled by :func:`backward` and has the
    same shape as ``value``.
    """

    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "_vjp")

    def __init__(self, value, op="leaf", parents=(), vjp=None, requires_grad=False):
        self.value = value if isinstance(value, np.ndarray) else _as_matrix(value)
        self.op = op
        self.parents = tuple(parents)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"<Node {self.op} {self.value.shape}>"


def constant(data) -> Node:
    """Leaf that never receives a gradient (inputs, masks, targets)."""
    return Node(_as_matrix(data), op="const")


def parameter(data) -> Node:
    """Leaf that accumulates a gradient during the backward pass."""
    return Node(_as_matrix(data), op="param", requires_grad=True)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, op, parents, vjp) -> Node:
    requires = any(p.requires_grad for p in parents)
    return Node(_freeze(value), op=op, parents=parents,
                vjp=vjp if requires else None, requires_grad=requires)


# ---------------------------------------------------------------------------
# op vocabulary
# ---------------------------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return _make(out, "matmul", (a, b), vjp)


def _check_addlike(a: Node, b: Node, name: str) -> bool:
    """Shapes must match exactly or ``b`` must be a broadcastable 1-row matrix."""
    if a.shape == b.shape:
        return False
    if b.shape == (1, a.shape[1]):
        return True
    raise ValueError(f"{name} shape mismatch: {a.shape} vs {b.shape}")


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    broadcast = _check_addlike(a, b, "add")
    out = a.value + b.value

    def vjp(g):
        gb = g.sum(axis=0, keepdims=True) if broadcast else g
        return g, gb

    return _make(out, "add", (a, b), vjp)


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    broadcast = _check_addlike(a, b, "sub")
    out = a.value - b.value

    def vjp(g):
        gb = -g.sum(axis=0, keepdims=True) if broadcast else -g
        return g, gb

    return _make(out, "sub", (a, b), vjp)


def mul(a, b) -> Node:
    """Elementwise product of same-shape matrices."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.value * b.value

    def vjp(g):
        return g * b.value, g * a.value

    return _make(out, "mul", (a, b), vjp)


def scale(a, c: float) -> Node:
    a = _lift(a)
    c = float(c)
    out = a.value * c

    def vjp(g):
        return (g * c,)

    return _make(out, "scale", (a,), vjp)


def relu(a) -> Node:
    a = _lift(a)
    out = np.maximum(a.value, 0.0)
    mask = a.value > 0.0

    def vjp(g):
        return (g * mask,)

    return _make(out, "relu", (a,), vjp)


def sigmoid(a) -> Node:
    a = _lift(a)
    # Split by sign so exp never overflows.
    x = a.value
    out = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (a,), vjp)


def log(a) -> Node:
    """Natural log; caller must keep inputs strictly positive (see clip)."""
    a = _lift(a)
    if np.any(a.value <= 0.0):
        raise ValueError("log requires strictly positive input")
    out = np.log(a.value)

    def vjp(g):
        return (g / a.value,)

    return _make(out, "log", (a,), vjp)


def clip(a, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient is passed only where the input was interior."""
    a = _lift(a)
    out = np.clip(a.value, lo, hi)
    mask = (a.value > lo) & (a.value < hi)

    def vjp(g):
        return (g * mask,)

    return _make(out, "clip", (a,), vjp)


def softmax_rows(a) -> Node:
    """Row-wise softmax with per-row max subtraction for stability."""
    a = _lift(a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax_rows", (a,), vjp)


def transpose(a) -> Node:
    a = _lift(a)

    def vjp(g):
        return (g.T,)

    return _make(a.value.T, "transpose", (a,), vjp)


def mean_rows(a) -> Node:
    """Mean-pool over rows, returning a 1 x cols matrix."""
    a = _lift(a)
    rows = a.shape[0]
    out = a.value.mean(axis=0, keepdims=True)

    def vjp(g):
        return (np.repeat(g / rows, rows, axis=0),)

    return _make(out, "mean_rows", (a,), vjp)


def mean_all(a) -> Node:
    a = _lift(a)
    n = a.value.size
    out = np.array([[a.value.mean()]])

    def vjp(g):
        return (np.full(a.shape, g[0, 0] / n),)

    return _make(out, "mean_all", (a,), vjp)


def sum_all(a) -> Node:
    a = _lift(a)
    out = np.array([[a.value.sum()]])

    def vjp(g):
        return (np.full(a.shape, g[0, 0]),)

    return _make(out, "sum_all", (a,), vjp)


def slice_rows(a, start: int, stop: int) -> Node:
    a = _lift(a)
    if not (0 <= start < stop <= a.shape[0]):
        raise ValueError(f"row slice [{start}:{stop}] out of range for {a.shape}")
    out = a.value[start:stop, :]

    def vjp(g):
        full = np.zeros(a.shape)
        full[start:stop, :] = g
        return (full,)

    return _make(out, "slice_rows", (a,), vjp)


def slice_cols(a, start: int, stop: int) -> Node:
    a = _lift(a)
    if not (0 <= start < stop <= a.shape[1]):
        raise ValueError(f"col slice [{start}:{stop}] out of range for {a.shape}")
    out = a.value[:, start:stop]

    def vjp(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    return _make(out, "slice_cols", (a,), vjp)


def concat_rows(nodes) -> Node:
    nodes = [_lift(n) for n in nodes]
    if not nodes:
        raise ValueError("concat_rows needs at least one input")
    cols = nodes[0].shape[1]
    if any(n.shape[1] != cols for n in nodes):
        raise ValueError("concat_rows inputs must share a column count")
    out = np.concatenate([n.value for n in nodes], axis=0)
    sizes = [n.shape[0] for n in nodes]

    def vjp(g):
        grads, at = [], 0
        for size in sizes:
            grads.append(g[at:at + size, :])
            at += size
        return tuple(grads)

    return _make(out, "concat_rows", tuple(nodes), vjp)


def concat_cols(nodes) -> Node:
    nodes = [_lift(n) for n in nodes]
    if not nodes:
        raise ValueError("concat_cols needs at least one input")
    rows = nodes[0].shape[0]
    if any(n.shape[0] != rows for n in nodes):
        raise ValueError("concat_cols inputs must share a row count")
    out = np.concatenate([n.value for n in nodes], axis=1)
    sizes = [n.shape[1] for n in nodes]

    def vjp(g):
        grads, at = [], 0
        for size in sizes:
            grads.append(g[:, at:at + size])
            at += size
        return tuple(grads)

    return _make(out, "concat_cols", tuple(nodes), vjp)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running statistics for one batch-norm block.

    The learned affine (gamma, beta) is passed to :func:`batch_norm`
    explicitly so it can live on the tape like any other parameter;
    this object only tracks the exponential moving averages consumed in
    eval mode.
    """

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        self.width = int(width)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.running_mean = np.zeros((1, self.width))
        self.running_var = np.ones((1, self.width))

    def copy(self) -> "BatchNormState":
        dup = BatchNormState(self.width, self.momentum, self.eps)
        dup.running_mean = self.running_mean.copy()
        dup.running_var = self.running_var.copy()
        return dup


def batch_norm(x, gamma, beta, state: BatchNormState, mode: str = "train",
               update_running: bool = True) -> Node:
    """Column-wise batch normalization.

    Train mode normalizes each column to zero mean / unit variance over
    the rows of ``x`` (biased variance, ``eps`` inside the square root),
    applies the affine ``gamma * xhat + beta`` and, unless suppressed,
    folds the batch statistics into the running averages.  Eval mode
    normalizes with the running statistics instead.  Train mode rejects
    single-row input because the column variance is undefined there.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    rows, cols = x.shape
    if gamma.shape != (1, cols) or beta.shape != (1, cols):
        raise ValueError("gamma/beta must be 1-row matrices matching x columns")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    if mode == "train":
        if rows < 2:
            raise ValueError("train-mode batch_norm needs at least 2 rows")
        mean = x.value.mean(axis=0, keepdims=True)
        var = x.value.var(axis=0, keepdims=True)
        if update_running:
            m = state.momentum
            state.running_mean = (1.0 - m) * state.running_mean + m * mean
            state.running_var = (1.0 - m) * state.running_var + m * var
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.value - mean) * inv_std
        out = gamma.value * xhat + beta.value

        def vjp(g):
            dxhat = g * gamma.value
            # Standard train-mode adjoint: statistics depend on x.
            dx = (inv_std / rows) * (
                rows * dxhat
                - dxhat.sum(axis=0, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=0, keepdims=True)
            )
            dgamma = (g * xhat).sum(axis=0, keepdims=True)
            dbeta = g.sum(axis=0, keepdims=True)
            return dx, dgamma, dbeta

        return _make(out, "batch_norm_train", (x, gamma, beta), vjp)

    inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.value - state.running_mean) * inv_std
    out = gamma.value * xhat + beta.value

    def vjp(g):
        dx = g * gamma.value * inv_std
        dgamma = (g * xhat).sum(axis=0, keepdims=True)
        dbeta = g.sum(axis=0, keepdims=True)
        return dx, dgamma, dbeta

    return _make(out, "batch_norm_eval", (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Node) -> list[Node]:
    """Iterative post-order over the requires_grad subgraph."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate gradients of a 1x1 scalar node into its ancestors."""
    if root.shape != (1, 1):
        raise ValueError(f"backward needs a 1x1 scalar root, got {root.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        parent_grads = node._vjp(node.grad)
        for parent, pgrad in zip(node.parents, parent_grads):
            if not parent.requires_grad or pgrad is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(pgrad, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + pgrad


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradientCheck:
    """Result of comparing analytic against central-difference gradients."""

    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray


def check_gradients(f, theta, step: float = 1e-5) -> GradientCheck:
    """Compare the analytic gradient of ``f`` against central differences.

    ``f`` maps a flat float64 parameter vector to ``(value, gradient)``.
    The relative error at index i is
    ``|analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)``.
    """
    theta = np.asarray(theta, dtype=np.float64).ravel().copy()
    _, analytic = f(theta)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != theta.shape:
        raise ValueError("gradient length does not match parameter length")
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] = theta[i] + step
        hi, _ = f(bumped)
        bumped[i] = theta[i] - step
        lo, _ = f(bumped)
        numeric[i] = (hi - lo) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradientCheck(float(rel[worst]) if rel.size else 0.0, worst, analytic, numeric)


def assert_gradients_close(f, theta, tolerance: float, step: float = 1e-5) -> GradientCheck:
    """check_gradients that raises, naming the offending parameter index."""
    result = check_gradients(f, theta, step=step)
    if result.max_rel_error > tolerance:
        i = result.worst_index
        raise AssertionError(
            f"gradient mismatch at parameter {i}: analytic={result.analytic[i]:.6e} "
            f"numeric={result.numeric[i]:.6e} rel={result.max_rel_error:.3e} "
            f"(tolerance {tolerance:.1e})"
        )
    return result
