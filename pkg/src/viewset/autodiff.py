"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Every tensor in the computation graph is a :class:`Node` wrapping a 2-D
numpy array (row-major, 64-bit). Operations build the graph eagerly and
register a closure that routes the output gradient back to the inputs;
:func:`backward` replays those closures once per node in reverse
topological order. Scalars are represented as 1x1 matrices.

The op set is intentionally small: just enough to express the full
view-set model (attention blocks, pooling, classifier head) and its
training loss. Everything runs single-threaded on the CPU; determinism
is guaranteed for a fixed seed.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_matrix(values, dtype=np.float64) -> Array:
    """Coerce input to a C-contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(values, dtype=dtype)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got ndim={arr.ndim}")
    return arr


class Node:
    """A value in the computation graph: 2-D array plus gradient slot.

    Leaf nodes (parameters, inputs) have no parents. Interior nodes
    remember their parents and a backward closure so that the chain rule
    can run from any scalar loss.
    """

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value: Array, parents: tuple["Node", ...] = (),
                 backward: Callable[[], None] | None = None):
        self.value = as_matrix(value)
        self.grad = np.zeros_like(self.value)
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        r, c = self.shape
        return f"Node({r}x{c}, leaf={not self.parents})"


def parameter(values) -> Node:
    """Leaf node intended to be updated by an optimizer."""
    return Node(values)


def constant(values) -> Node:
    """Leaf node that still receives a gradient but is never stepped."""
    return Node(values)


def _shape_report(op: str, *nodes: Node) -> str:
    shapes = ", ".join(f"{n.shape[0]}x{n.shape[1]}" for n in nodes)
    return f"{op}: incompatible shapes ({shapes})"


def matmul(a: Node, b: Node) -> Node:
    """Matrix product a @ b with dA = dC @ B^T and dB = A^T @ dC."""
    if a.shape[1] != b.shape[0]:
        raise ValueError(_shape_report("matmul", a, b))
    out = Node(a.value @ b.value, (a, b))

    def _back():
        a.grad += out.grad @ b.value.T
        b.grad += a.value.T @ out.grad

    out._backward = _back
    return out


def transpose(a: Node) -> Node:
    out = Node(a.value.T.copy(), (a,))

    def _back():
        a.grad += out.grad.T

    out._backward = _back
    return out


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; `b` may be a 1xN row vector broadcast over rows."""
    if a.shape == b.shape:
        pass
    elif b.shape == (1, a.shape[1]):
        pass
    else:
        raise ValueError(_shape_report("add", a, b))
    out = Node(a.value + b.value, (a, b))

    def _back():
        a.grad += out.grad
        if b.shape == a.shape:
            b.grad += out.grad
        else:
            b.grad += out.grad.sum(axis=0, keepdims=True)

    out._backward = _back
    return out


def mul(a: Node, b: Node) -> Node:
    """Elementwise product; either side may be a broadcast 1xN row."""
    if a.shape != b.shape and a.shape != (1, b.shape[1]) and b.shape != (1, a.shape[1]):
        raise ValueError(_shape_report("mul", a, b))
    out = Node(a.value * b.value, (a, b))

    def _back():
        ga = out.grad * b.value
        gb = out.grad * a.value
        a.grad += ga if a.shape == out.shape else ga.sum(axis=0, keepdims=True)
        b.grad += gb if b.shape == out.shape else gb.sum(axis=0, keepdims=True)

    out._backward = _back
    return out


def scale(a: Node, s: float) -> Node:
    out = Node(a.value * s, (a,))

    def _back():
        a.grad += out.grad * s

    out._backward = _back
    return out


def affine_rows(a: Node, row_scale: Array, row_shift: Array) -> Node:
    """y = a * row_scale + row_shift with constant 1xN rows (no gradient to them)."""
    out = Node(a.value * row_scale + row_shift, (a,))

    def _back():
        a.grad += out.grad * row_scale

    out._backward = _back
    return out


def softmax_rows(x: Node) -> Node:
    """Row-wise softmax, stabilized by per-row max subtraction."""
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Node(y, (x,))

    def _back():
        g = out.grad
        x.grad += y * (g - (g * y).sum(axis=1, keepdims=True))

    out._backward = _back
    return out


def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    """Per-row standardization (biased variance) followed by a learned affine."""
    if eps <= 0.0:
        raise ValueError("layer_norm: eps must be positive")
    if gamma.shape != (1, x.shape[1]) or beta.shape != (1, x.shape[1]):
        raise ValueError(_shape_report("layer_norm", x, gamma, beta))
    mu = x.value.mean(axis=1, keepdims=True)
    var = x.value.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    out = Node(xhat * gamma.value + beta.value, (x, gamma, beta))

    def _back():
        g = out.grad
        gamma.grad += (g * xhat).sum(axis=0, keepdims=True)
        beta.grad += g.sum(axis=0, keepdims=True)
        gx = g * gamma.value
        x.grad += (gx - gx.mean(axis=1, keepdims=True)
                   - xhat * (gx * xhat).mean(axis=1, keepdims=True)) * inv

    out._backward = _back
    return out


def batch_standardize(x: Node, gamma: Node, beta: Node,
                      eps: float = 1e-5) -> tuple[Node, Array, Array]:
    """Per-column standardization over the batch dimension (rows).

    Returns the normalized node plus the batch mean/variance so the caller
    can maintain running statistics for evaluation mode.
    """
    if gamma.shape != (1, x.shape[1]) or beta.shape != (1, x.shape[1]):
        raise ValueError(_shape_report("batch_standardize", x, gamma, beta))
    mu = x.value.mean(axis=0, keepdims=True)
    var = x.value.var(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    n = x.shape[0]
    out = Node(xhat * gamma.value + beta.value, (x, gamma, beta))

    def _back():
        g = out.grad
        gamma.grad += (g * xhat).sum(axis=0, keepdims=True)
        beta.grad += g.sum(axis=0, keepdims=True)
        gx = g * gamma.value
        x.grad += (gx - gx.sum(axis=0, keepdims=True) / n
                   - xhat * (gx * xhat).sum(axis=0, keepdims=True) / n) * inv

    out._backward = _back
    return out, mu, var


def gelu(x: Node) -> Node:
    """Gaussian error linear unit (exact erf form)."""
    cdf = 0.5 * (1.0 + erf(x.value * _INV_SQRT2))
    out = Node(x.value * cdf, (x,))

    def _back():
        pdf = np.exp(-0.5 * x.value * x.value) * _INV_SQRT2PI
        x.grad += out.grad * (cdf + x.value * pdf)

    out._backward = _back
    return out


def relu(x: Node) -> Node:
    out = Node(np.maximum(x.value, 0.0), (x,))

    def _back():
        x.grad += out.grad * (x.value > 0.0)

    out._backward = _back
    return out


def dropout(x: Node, rate: float, train: bool,
            rng: np.random.Generator | None = None) -> Node:
    """Inverted dropout: zero entries with probability `rate`, scale
    survivors by 1/(1-rate) so that evaluation mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode with rate > 0 requires an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Node(x.value * mask, (x,))

    def _back():
        x.grad += out.grad * mask

    out._backward = _back
    return out


def cross_entropy(logits: Node, labels: Sequence[int]) -> Node:
    """Mean negative log-likelihood of the true classes; scalar output.

    Gradient of the logits is (softmax - onehot) / batch_size.
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = logits.shape
    if y.shape[0] != b:
        raise ValueError(f"cross_entropy: {y.shape[0]} labels for {b} logit rows")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(b), y].mean()
    out = Node(np.array([[loss]]), (logits,))

    def _back():
        probs = np.exp(logp)
        probs[np.arange(b), y] -= 1.0
        logits.grad += out.grad[0, 0] * probs / b

    out._backward = _back
    return out


def sum_all(x: Node) -> Node:
    out = Node(np.array([[x.value.sum()]]), (x,))

    def _back():
        x.grad += out.grad[0, 0]

    out._backward = _back
    return out


def mean_rows(x: Node) -> Node:
    """Column-wise mean over rows, shape 1xN."""
    m = x.shape[0]
    out = Node(x.value.mean(axis=0, keepdims=True), (x,))

    def _back():
        x.grad += out.grad / m

    out._backward = _back
    return out


def max_rows(x: Node) -> Node:
    """Column-wise max over rows, shape 1xN.

    Subgradient routed to the first maximizing row per column (ties broken
    deterministically by lowest row index).
    """
    idx = x.value.argmax(axis=0)
    cols = np.arange(x.shape[1])
    out = Node(x.value[idx, cols].reshape(1, -1), (x,))

    def _back():
        g = np.zeros_like(x.value)
        g[idx, cols] = out.grad[0]
        x.grad += g

    out._backward = _back
    return out


def slice_rows(x: Node, start: int, stop: int) -> Node:
    out = Node(x.value[start:stop, :].copy(), (x,))

    def _back():
        x.grad[start:stop, :] += out.grad

    out._backward = _back
    return out


def slice_cols(x: Node, start: int, stop: int) -> Node:
    out = Node(x.value[:, start:stop].copy(), (x,))

    def _back():
        x.grad[:, start:stop] += out.grad

    out._backward = _back
    return out


def concat_cols(nodes: Sequence[Node]) -> Node:
    widths = [n.shape[1] for n in nodes]
    out = Node(np.concatenate([n.value for n in nodes], axis=1), tuple(nodes))

    def _back():
        j = 0
        for n, w in zip(nodes, widths):
            n.grad += out.grad[:, j:j + w]
            j += w

    out._backward = _back
    return out


def concat_rows(nodes: Sequence[Node]) -> Node:
    heights = [n.shape[0] for n in nodes]
    out = Node(np.concatenate([n.value for n in nodes], axis=0), tuple(nodes))

    def _back():
        i = 0
        for n, h in zip(nodes, heights):
            n.grad += out.grad[i:i + h, :]
            i += h

    out._backward = _back
    return out


def _topo_order(root: Node) -> list[Node]:
    """Iterative post-order DFS; avoids recursion limits on deep graphs."""
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Propagate d(loss)/d(node) into every reachable node's `.grad`.

    The loss must be a 1x1 scalar. Each node's backward closure runs
    exactly once, in reverse topological order; gradients accumulate, so
    callers zero parameter gradients between steps.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward: loss must be a 1x1 scalar, got {loss.shape}")
    order = _topo_order(loss)
    loss.grad[...] = 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def zero_grads(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.zero_grad()
