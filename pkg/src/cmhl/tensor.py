"""Dense float64 tensors with reverse-mode automatic differentiation.

The primitive set is exactly what the model needs: matmul, add, elementwise
product, reductions, reshaping, gather/select, ReLU, GELU, softplus, softmax,
layer norm, dropout, embedding lookup, block-repeat scaling, concatenation,
and cross-entropy. Every primitive carries its own backward closure; gradients
accumulate into ``.grad`` so micro-batch accumulation works without extra
bookkeeping.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError, DeterminismError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "param",
    "zeros",
    "ones",
    "matmul",
    "concat",
    "gather",
    "relu",
    "gelu",
    "softplus",
    "softmax",
    "layer_norm",
    "dropout",
    "embedding",
    "repeat_blocks",
    "cross_entropy",
    "backward",
    "computation_record",
    "finite_diff_check",
]

LOG_EPS = 1e-12
LAYERNORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast dimensions."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional float64 value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _node(np.add(self.data, other.data), (self, other), "add")
        if out.requires_grad:

            def back() -> None:
                if self.requires_grad:
                    self._ensure_grad()[...] += _unbroadcast(out.grad, self.shape)
                if other.requires_grad:
                    other._ensure_grad()[...] += _unbroadcast(out.grad, other.shape)

            out._backward = back
        return out

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _node(np.multiply(self.data, other.data), (self, other), "mul")
        if out.requires_grad:

            def back() -> None:
                if self.requires_grad:
                    self._ensure_grad()[...] += _unbroadcast(out.grad * other.data, self.shape)
                if other.requires_grad:
                    other._ensure_grad()[...] += _unbroadcast(out.grad * self.data, other.shape)

            out._backward = back
        return out

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return Tensor(other) + (-self)

    def __truediv__(self, scalar: float) -> "Tensor":
        return self * (1.0 / float(scalar))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        out = _node(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            original = self.shape

            def back() -> None:
                self._ensure_grad()[...] += out.grad.reshape(original)

            out._backward = back
        return out

    def swapaxes(self, a: int, b: int) -> "Tensor":
        out = _node(self.data.swapaxes(a, b), (self,), "swapaxes")
        if out.requires_grad:

            def back() -> None:
                self._ensure_grad()[...] += out.grad.swapaxes(a, b)

            out._backward = back
        return out

    def select(self, axis: int, index: int) -> "Tensor":
        """Pick a single index along ``axis``, dropping that axis."""
        out = _node(np.take(self.data, index, axis=axis), (self,), "select")
        if out.requires_grad:

            def back() -> None:
                grad = self._ensure_grad()
                sl = [slice(None)] * grad.ndim
                sl[axis] = index
                grad[tuple(sl)] += out.grad

            out._backward = back
        return out

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:

            def back() -> None:
                grad = out.grad
                if axis is not None and not keepdims:
                    grad = np.expand_dims(grad, axis)
                self._ensure_grad()[...] += np.broadcast_to(grad, self.shape)

            out._backward = back
        return out

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / count

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: tuple, op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=parents if requires else (), op=op)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def param(shape: Sequence[int], rng: np.random.Generator, std: float = 0.02) -> Tensor:
    """Trainable tensor initialized from normal(0, std)."""
    return Tensor(rng.normal(0.0, std, size=tuple(shape)), requires_grad=True)


# -- primitives --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = _node(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:

        def back() -> None:
            if a.requires_grad:
                ga = np.matmul(out.grad, b.data.swapaxes(-1, -2))
                a._ensure_grad()[...] += _unbroadcast(ga, a.shape)
            if b.requires_grad:
                gb = np.matmul(a.data.swapaxes(-1, -2), out.grad)
                b._ensure_grad()[...] += _unbroadcast(gb, b.shape)

        out._backward = back
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(tensors)
    out = _node(np.concatenate([t.data for t in parts], axis=axis), parts, "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in parts]
        splits = np.cumsum(sizes)[:-1]

        def back() -> None:
            pieces = np.split(out.grad, splits, axis=axis)
            for t, piece in zip(parts, pieces):
                if t.requires_grad:
                    t._ensure_grad()[...] += piece

        out._backward = back
    return out


def gather(x: Tensor, indices, axis: int = -1) -> Tensor:
    """Select the given indices along ``axis``, keeping the axis."""
    idx = np.asarray(indices, dtype=np.intp)
    out = _node(np.take(x.data, idx, axis=axis), (x,), "gather")
    if out.requires_grad:

        def back() -> None:
            grad = x._ensure_grad()
            expanded = np.moveaxis(grad, axis, 0)
            np.add.at(expanded, idx, np.moveaxis(out.grad, axis, 0))

        out._backward = back
    return out


def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0.0), (x,), "relu")
    if out.requires_grad:

        def back() -> None:
            x._ensure_grad()[...] += out.grad * (x.data > 0.0)

        out._backward = back
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = _node(x.data * cdf, (x,), "gelu")
    if out.requires_grad:

        def back() -> None:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            x._ensure_grad()[...] += out.grad * (cdf + x.data * pdf)

        out._backward = back
    return out


def softplus(x: Tensor) -> Tensor:
    out = _node(np.logaddexp(0.0, x.data), (x,), "softplus")
    if out.requires_grad:

        def back() -> None:
            sig = 1.0 / (1.0 + np.exp(-x.data))
            x._ensure_grad()[...] += out.grad * sig

        out._backward = back
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-wise softmax with max-subtraction for overflow safety."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite logits")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=axis, keepdims=True)
    out = _node(y, (x,), "softmax")
    if out.requires_grad:

        def back() -> None:
            dot = (out.grad * y).sum(axis=axis, keepdims=True)
            x._ensure_grad()[...] += y * (out.grad - dot)

        out._backward = back
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd
    out = _node(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")
    if out.requires_grad:

        def back() -> None:
            g = out.grad
            if gain.requires_grad:
                gain._ensure_grad()[...] += _unbroadcast(g * xhat, gain.shape)
            if bias.requires_grad:
                bias._ensure_grad()[...] += _unbroadcast(g, bias.shape)
            if x.requires_grad:
                dxhat = g * gain.data
                term = dxhat - dxhat.mean(axis=-1, keepdims=True)
                term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                x._ensure_grad()[...] += istd * term

        out._backward = back
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity in evaluation mode."""
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    out = _node(x.data * scale, (x,), "dropout")
    if out.requires_grad:

        def back() -> None:
            x._ensure_grad()[...] += out.grad * scale

        out._backward = back
    return out


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into ``weight`` by integer id array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding id out of range for table of {weight.shape[0]} rows")
    out = _node(weight.data[ids], (weight,), "embedding")
    if out.requires_grad:

        def back() -> None:
            np.add.at(weight._ensure_grad(), ids, out.grad)

        out._backward = back
    return out


def repeat_blocks(x: Tensor, sizes: Sequence[int]) -> Tensor:
    """Repeat each entry of the last axis blockwise: entry i appears sizes[i] times."""
    if len(sizes) != x.shape[-1]:
        raise ShapeError("repeat_blocks needs one size per entry of the last axis")
    reps = np.asarray(sizes, dtype=np.intp)
    out = _node(np.repeat(x.data, reps, axis=-1), (x,), "repeat_blocks")
    if out.requires_grad:
        offsets = np.concatenate([[0], np.cumsum(reps)[:-1]])

        def back() -> None:
            x._ensure_grad()[...] += np.add.reduceat(out.grad, offsets, axis=-1)

        out._backward = back
    return out


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean over rows of -ln(probs[row, label]), with log arguments clamped at 1e-12."""
    labels = np.asarray(labels, dtype=np.intp)
    if probs.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [rows, classes], got {probs.shape}")
    rows, k = probs.data.shape
    if labels.shape != (rows,):
        raise ShapeError(f"expected {rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise DataError(f"label {bad} out of range for {k} classes")
    picked = probs.data[np.arange(rows), labels]
    out = _node(np.mean(-np.log(np.maximum(picked, LOG_EPS))), (probs,), "cross_entropy")
    if out.requires_grad:

        def back() -> None:
            grad = probs._ensure_grad()
            live = picked > LOG_EPS
            contrib = np.where(live, -1.0 / (np.maximum(picked, LOG_EPS) * rows), 0.0)
            np.add.at(grad, (np.arange(rows), labels), float(out.grad) * contrib)

        out._backward = back
    return out


# -- backward pass ------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor the scalar ``loss`` depends on."""
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    loss._ensure_grad()[...] += 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def computation_record(root: Tensor) -> list[tuple[str, tuple[int, ...], int]]:
    """Topologically ordered (op, input ids, output id) triples for ``root``'s graph."""
    order = _topo_order(root)
    ids = {id(node): i for i, node in enumerate(order)}
    return [(node.op, tuple(ids[id(p)] for p in node._parents), ids[id(node)]) for node in order]


# -- gradient verification -----------------------------------------------------


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    point: Tensor,
    eps: float = 1e-5,
    grad_offset: float = 0.0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must be a deterministic map from ``point`` to a scalar Tensor; two
    forward passes are compared to detect nondeterminism. ``grad_offset``
    perturbs the analytic gradient before comparison and exists purely as a
    negative-control hook for self-tests.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    first = np.array(fn(point).data, copy=True)
    second = fn(point).data
    if not np.array_equal(first, second):
        raise DeterminismError("fn produced different values on identical inputs")

    point.requires_grad = True
    point.zero_grad()
    backward(fn(point))
    analytic = point.grad.copy() + grad_offset

    flat = point.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        f_plus = float(fn(point).data)
        flat[i] = saved - eps
        f_minus = float(fn(point).data)
        flat[i] = saved
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic.reshape(-1)))
    return float(np.max(np.abs(analytic.reshape(-1) - numeric) / denom)) if flat.size else 0.0
