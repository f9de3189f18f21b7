"""Reverse-mode differentiable arrays over numpy.

A ``Tensor`` wraps a numpy array (float32 for training, float64 for gradient
replay) and records provenance so that ``backward()`` on a scalar loss fills
``grad`` on every reachable tensor with ``requires_grad=True``. The op set is
exactly what the detector needs; there is no general-purpose public API.

Graphs are built only while gradients are enabled (see ``no_grad``), so frozen
inference pays nothing for provenance tracking.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from tabwild.errors import NumericError, ProtocolError

_GRAD_ENABLED = True

# Clamp used by both losses so log() never sees 0.
LOSS_EPS = 1e-7


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.values: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Reverse sweep from a scalar; populates ``grad`` on reachable leaves."""
        if self.values.size != 1:
            raise ProtocolError(
                f"backward() requires a scalar, got shape {self.values.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.values)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            contributions = node._backward(node.grad)
            for parent, contrib in zip(node._parents, contributions):
                if contrib is None:
                    continue
                if parent.grad is None:
                    parent.grad = contrib.astype(parent.values.dtype, copy=False)
                else:
                    parent.grad = parent.grad + contrib


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce scalars/arrays to tensors, matching the dtype of the tensor operand."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.values.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.values.dtype)), b
    return Tensor(a), Tensor(b)


def _node(values: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# Arithmetic primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    v = a.values + b.values

    def bw(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    return _node(v, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    v = a.values - b.values

    def bw(g):
        return _unbroadcast(g, a.values.shape), -_unbroadcast(g, b.values.shape)

    return _node(v, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    v = a.values * b.values

    def bw(g):
        return (
            _unbroadcast(g * b.values, a.values.shape),
            _unbroadcast(g * a.values, b.values.shape),
        )

    return _node(v, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ProtocolError("matmul expects operands with ndim >= 2")
    v = a.values @ b.values

    def bw(g):
        ga = g @ b.values.swapaxes(-1, -2)
        gb = a.values.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.values.shape), _unbroadcast(gb, b.values.shape)

    return _node(v, (a, b), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    v = x.values.reshape(shape)

    def bw(g):
        return (g.reshape(x.values.shape),)

    return _node(v, (x,), bw)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    v = np.transpose(x.values, axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _node(v, (x,), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    v = x.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.values.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, x.values.shape).copy(),)

    return _node(v, (x,), bw)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.values.size if axis is None else x.values.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    v = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _node(v, tuple(tensors), bw)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    v = np.broadcast_to(x.values, shape)

    def bw(g):
        return (_unbroadcast(g, x.values.shape),)

    return _node(v, (x,), bw)


# ---------------------------------------------------------------------------
# Indexing primitives
# ---------------------------------------------------------------------------

def gather(x: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup along axis 0 (embedding tables, datum selection)."""
    idx = np.asarray(indices)
    v = x.values[idx]

    def bw(g):
        out = np.zeros_like(x.values)
        np.add.at(out, idx, g)
        return (out,)

    return _node(v, (x,), bw)


def scatter_rows(x: Tensor, indices: np.ndarray, length: int) -> Tensor:
    """Place rows of `x` at `indices` of a zero-filled axis-0 of size `length`."""
    idx = np.asarray(indices)
    v = np.zeros((length,) + x.values.shape[1:], dtype=x.values.dtype)
    v[idx] = x.values

    def bw(g):
        return (g[idx],)

    return _node(v, (x,), bw)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Slice one index off `axis` (dimension removed)."""
    v = np.take(x.values, index, axis=axis)

    def bw(g):
        out = np.zeros_like(x.values)
        slicer = (slice(None),) * axis + (index,)
        out[slicer] = g
        return (out,)

    return _node(v, (x,), bw)


# ---------------------------------------------------------------------------
# Nonlinearities, normalization, attention support
# ---------------------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x.values + 0.044715 * x.values**3)
    t = np.tanh(inner)
    v = 0.5 * x.values * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x.values**2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.values * (1.0 - t**2) * dinner
        return (g * dx,)

    return _node(v, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    z = x.values
    v = np.empty_like(z)
    pos = z >= 0
    v[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    v[~pos] = ez / (1.0 + ez)

    def bw(g):
        return (g * v * (1.0 - v),)

    return _node(v, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.values
    check_finite(z, "softmax logits")
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    v = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * v).sum(axis=axis, keepdims=True)
        return (v * (g - dot),)

    return _node(v, (x,), bw)


def masked_softmax(logits: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to positions where `mask` is true.

    Masked positions get exactly zero weight. A row with no attendable
    position has no defined distribution and raises ``NumericError``.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.values.shape)
    if not m.any(axis=axis).all():
        raise NumericError("softmax over empty support: attention mask row is all false")
    z = np.where(m, logits.values, -np.inf)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    v = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * v).sum(axis=axis, keepdims=True)
        return (v * (g - dot),)

    return _node(v, (logits,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned scale/shift."""
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    v = xhat * gamma.values + beta.values

    def bw(g):
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gamma.values
        dx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _node(v, (x, gamma, beta), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float = 0.1,
    training: bool = False,
    eps: float = 1e-5,
) -> Tensor:
    """Feature-wise batch normalization with running inference statistics.

    `running_mean` / `running_var` are plain arrays mutated in place during
    training; they are not part of the autodiff graph.
    """
    if training:
        mu = x.values.mean(axis=0)
        var = x.values.var(axis=0)
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * mu
        running_var[:] = (1.0 - momentum) * running_var + momentum * var
    else:
        mu = running_mean.astype(x.values.dtype)
        var = running_var.astype(x.values.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    v = xhat * gamma.values + beta.values

    def bw(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        gx = g * gamma.values
        if training:
            dx = inv * (
                gx
                - gx.mean(axis=0)
                - xhat * (gx * xhat).mean(axis=0)
            )
        else:
            dx = gx * inv
        return dx, dgamma, dbeta

    return _node(v, (x, gamma, beta), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Training-time dropout; callers skip this entirely at inference."""
    if rate <= 0.0:
        return x
    keep = rng.random(x.values.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    factor = keep * np.asarray(scale, dtype=x.values.dtype)
    v = x.values * factor

    def bw(g):
        return (g * factor,)

    return _node(v, (x,), bw)


def grl(x: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, gradient times -lam backward."""
    if lam < 0:
        raise ProtocolError(f"gradient reversal strength must be >= 0, got {lam}")

    def bw(g):
        return (g * (-lam),)

    return _node(x.values, (x,), bw)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def bce_loss(p: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of probabilities against 0/1 targets."""
    y = np.asarray(targets, dtype=p.values.dtype)
    check_finite(p.values, "probabilities for binary cross-entropy")
    pc = np.clip(p.values, LOSS_EPS, 1.0 - LOSS_EPS)
    n = pc.size
    v = np.asarray(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean(), dtype=p.values.dtype)

    def bw(g):
        inside = (p.values >= LOSS_EPS) & (p.values <= 1.0 - LOSS_EPS)
        dp = (-y / pc + (1.0 - y) / (1.0 - pc)) / n
        return (g * dp * inside,)

    return _node(v, (p,), bw)


def ce_loss(probs: Tensor, classes: np.ndarray) -> Tensor:
    """Mean negative log probability of the true class (inputs on the simplex)."""
    idx = np.asarray(classes)
    n_rows, n_classes = probs.values.shape
    if idx.min() < 0 or idx.max() >= n_classes:
        raise ProtocolError(
            f"class index out of range: got {int(idx.max())} for {n_classes} classes"
        )
    check_finite(probs.values, "probabilities for cross-entropy")
    picked = probs.values[np.arange(n_rows), idx]
    pc = np.clip(picked, LOSS_EPS, 1.0 - LOSS_EPS)
    v = np.asarray(-np.log(pc).mean(), dtype=probs.values.dtype)

    def bw(g):
        out = np.zeros_like(probs.values)
        inside = (picked >= LOSS_EPS) & (picked <= 1.0 - LOSS_EPS)
        out[np.arange(n_rows), idx] = -1.0 / pc * inside / n_rows
        return (g * out,)

    return _node(v, (probs,), bw)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
