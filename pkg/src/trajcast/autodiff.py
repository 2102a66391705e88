"""Reverse-mode differentiation over dense float64 arrays.

A Graph is an append-only tape: every differentiable op pushes a node while a
graph is active, so creation order is a topological order and backward() is a
single reversed sweep. With no active graph, ops run eagerly (inference mode).
All data is 64-bit; every op checks its output for NaN/Inf unless disabled.
"""

from __future__ import annotations

import math
import threading

import numpy as np

CHECK_FINITE = True

_active = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Graph:
    """Tape of differentiable ops; use as a context manager around a forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Graph":
        stack = getattr(_active, "stack", None)
        if stack is None:
            stack = _active.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _active.stack.pop()
        return False


def current_graph() -> Graph | None:
    stack = getattr(_active, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor({self.name or 'anon'}, shape={self.data.shape})"

    # convenience operators; constants are wrapped without tracking
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    graph = current_graph()
    if out.requires_grad and graph is not None:
        # grad buffers are allocated on first accumulation, not up front
        out._parents = parents
        out._backward = backward
        graph.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast up from `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _acc(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward(out):
        _acc(a, out.grad)
        _acc(b, out.grad)

    return _make(data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward(out):
        _acc(a, out.grad * b.data)
        _acc(b, out.grad * a.data)

    return _make(data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: need >=2-d operands, got {a.data.shape} @ {b.data.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward(out):
        g = out.grad
        _acc(a, g @ np.swapaxes(b.data, -1, -2))
        _acc(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(data, (a, b), backward, "matmul")


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def backward(out):
        start = 0
        for t, n in zip(ts, sizes):
            idx = [slice(None)] * out.grad.ndim
            idx[axis if axis >= 0 else out.grad.ndim + axis] = slice(start, start + n)
            _acc(t, out.grad[tuple(idx)])
            start += n

    return _make(data, tuple(ts), backward, "concat")


def narrow(a, key) -> Tensor:
    """Basic-indexing slice; gradient scatters back into the sliced region."""
    a = _wrap(a)
    data = a.data[key]

    def backward(out):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[key] += out.grad

    return _make(np.ascontiguousarray(data), (a,), backward, "slice")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def backward(out):
        _acc(a, out.grad.reshape(a.data.shape))

    return _make(data, (a,), backward, "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    data = np.swapaxes(a.data, ax1, ax2)

    def backward(out):
        _acc(a, np.swapaxes(out.grad, ax1, ax2))

    return _make(np.ascontiguousarray(data), (a,), backward, "swapaxes")


def embedding_lookup(table, indices) -> Tensor:
    table = _wrap(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding index out of range [0, {table.data.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    data = table.data[idx]

    def backward(out):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, out.grad)

    return _make(data, (table,), backward, "embedding_lookup")


def relu(a) -> Tensor:
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def backward(out):
        _acc(a, out.grad * (a.data > 0.0))

    return _make(data, (a,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(out):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        _acc(a, out.grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner))

    return _make(data, (a,), backward, "gelu")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(out):
        _acc(a, out.grad * data * (1.0 - data))

    return _make(data, (a,), backward, "sigmoid")


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.data.shape))

    return _make(data, (a,), backward, "sum")


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / data.size

    def backward(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.data.shape) / count)

    return _make(data, (a,), backward, "mean")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    n = x.data.shape[-1]
    if n < 2:
        raise ShapeError(f"layer_norm needs last-axis length >= 2, got {n}")
    mean = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(out):
        g = out.grad
        _acc(gain, g * xhat)
        _acc(bias, g)
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        _acc(x, inv * term)

    return _make(data, (x, gain, bias), backward, "layer_norm")


def masked_softmax(scores, visible) -> Tensor:
    """Softmax over the last axis restricted to `visible` (broadcastable bool)."""
    scores = _wrap(scores)
    vis = np.broadcast_to(np.asarray(visible, dtype=bool), scores.data.shape)
    if not vis.any(axis=-1).all():
        raise ShapeError("masked_softmax: a row has no visible entries")
    masked = np.where(vis, scores.data, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    s = e.sum(axis=-1, keepdims=True)
    data = e / s

    def backward(out):
        g = out.grad
        _acc(scores, (g - (g * data).sum(axis=-1, keepdims=True)) * data)

    return _make(data, (scores,), backward, "masked_softmax")


def attention(q, k, v, visible) -> Tensor:
    """softmax(q kT / sqrt(d) + log-mask) v over the last two axes."""
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeError(f"attention: query dim {q.data.shape[-1]} != key dim {k.data.shape[-1]}")
    scale = 1.0 / math.sqrt(q.data.shape[-1])
    scores = mul(matmul(q, swapaxes(k, -1, -2)), scale)
    return matmul(masked_softmax(scores, visible), v)


def normalize_lastdim(x) -> Tensor:
    """x / |x| along the last axis; exact zeros map to zeros (zero gradient)."""
    x = _wrap(x)
    n = np.linalg.norm(x.data, axis=-1, keepdims=True)
    safe = np.where(n > 0.0, n, 1.0)
    data = x.data / safe

    def backward(out):
        g = out.grad
        proj = (g * data).sum(axis=-1, keepdims=True)
        _acc(x, np.where(n > 0.0, (g - data * proj) / safe, 0.0))

    return _make(data, (x,), backward, "normalize_lastdim")


def l2norm_lastdim(x) -> Tensor:
    """Euclidean norm along the last axis, with a zero subgradient at zero."""
    x = _wrap(x)
    n = np.linalg.norm(x.data, axis=-1)
    safe = np.where(n > 0.0, n, 1.0)

    def backward(out):
        g = np.expand_dims(out.grad / safe, -1)
        _acc(x, g * x.data)

    return _make(n, (x,), backward, "l2norm")


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross entropy in stable log-sum-exp form.

    Targets are constants in [0, 1]; returns per-element losses.
    """
    logits = _wrap(logits)
    y = np.asarray(targets, dtype=np.float64)
    if np.any((y < 0.0) | (y > 1.0)):
        raise ValueError("bce targets must lie in [0, 1]")
    z = logits.data
    data = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(out):
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        _acc(logits, out.grad * (p - y))

    return _make(data, (logits,), backward, "bce_with_logits")


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    x = _wrap(x)
    if p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)

    def backward(out):
        _acc(x, out.grad * keep)

    return _make(x.data * keep, (x,), backward, "dropout")


def backward(graph: Graph, loss: Tensor):
    """Populate .grad on every parameter reachable from a scalar loss."""
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad[...] = 1.0
    for node in reversed(graph.nodes):
        # nodes the loss never reached have no grad buffer; their pull is zero
        if node._backward is not None and node.grad is not None:
            node._backward(node)
