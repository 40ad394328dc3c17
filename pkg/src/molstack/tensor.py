"""A small float64 tensor engine with reverse-mode differentiation.

Covers exactly what the molecular models need: broadcasting arithmetic,
(batched) matmul, axis reductions, reshape/transpose/row-gather, a fused
masked softmax over the last dimension, erf (for exact GELU), and the
training losses. Every op materializes its output; no views, no fusion.
Gradients accumulate additively into ``.grad`` during ``backward``, and a
backward sweep visits each recorded node exactly once in reverse
topological order.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _np_erf

from .errors import DegenerateVector, NotScalar, ShapeMismatch


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- construction of op results ------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._vjp = vjp if out.requires_grad else None
        return out

    # -- basic properties ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"expected a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -astensor(other))

    def __rsub__(self, other):
        return add(astensor(other), -self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __pow__(self, p):
        return power(self, p)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        backward(self)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited = {id(root)}
    stack: list[tuple[Tensor, any]] = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        nxt = next(parents, None)
        if nxt is None:
            order.append(node)
            stack.pop()
        elif id(nxt) not in visited and nxt.requires_grad:
            visited.add(id(nxt))
            stack.append((nxt, iter(nxt._parents)))
    return order


def backward(t: Tensor) -> None:
    """Reverse-mode sweep from a scalar; accumulates into ``.grad``."""
    if t.size != 1:
        raise NotScalar(f"backward() needs a scalar, got shape {t.shape}")
    if not t.requires_grad:
        return
    order = _toposort(t)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad = t.grad + np.ones_like(t.data)
    for node in reversed(order):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


# --- primitive ops -----------------------------------------------------------


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _broadcast_check(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _broadcast_check(a, b, "mul")
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dims differ, {a.shape} @ {b.shape}") from None

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), vjp)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = astensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return Tensor._result(out, (x,), vjp)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = astensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return Tensor._result(out, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = astensor(x)
    out = x.data.reshape(shape).copy()

    def vjp(g):
        return (g.reshape(x.shape),)

    return Tensor._result(out, (x,), vjp)


def transpose(x, axes) -> Tensor:
    x = astensor(x)
    axes = tuple(axes)
    inverse = tuple(int(a) for a in np.argsort(axes))
    out = x.data.transpose(axes).copy()

    def vjp(g):
        return (g.transpose(inverse),)

    return Tensor._result(out, (x,), vjp)


def power(x, p) -> Tensor:
    x = astensor(x)
    p = float(p)
    out = x.data**p

    def vjp(g):
        return (g * p * x.data ** (p - 1.0),)

    return Tensor._result(out, (x,), vjp)


def exp(x) -> Tensor:
    x = astensor(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return Tensor._result(out, (x,), vjp)


def log(x) -> Tensor:
    x = astensor(x)
    out = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return Tensor._result(out, (x,), vjp)


def erf(x) -> Tensor:
    x = astensor(x)
    out = _np_erf(x.data)
    coeff = 2.0 / math.sqrt(math.pi)

    def vjp(g):
        return (g * coeff * np.exp(-np.square(x.data)),)

    return Tensor._result(out, (x,), vjp)


def absolute(x) -> Tensor:
    x = astensor(x)
    out = np.abs(x.data)

    def vjp(g):
        return (g * np.sign(x.data),)

    return Tensor._result(out, (x,), vjp)


def maximum_scalar(x, c: float) -> Tensor:
    x = astensor(x)
    c = float(c)
    out = np.maximum(x.data, c)

    def vjp(g):
        return (g * (x.data > c),)

    return Tensor._result(out, (x,), vjp)


def take_rows(x, indices, axis: int = 0) -> Tensor:
    """Gather along one axis by integer indices (backward scatter-adds)."""
    x = astensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(x.data, idx, axis=axis)

    def vjp(g):
        buf = np.zeros_like(x.data)
        np.add.at(np.moveaxis(buf, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (buf,)

    return Tensor._result(out, (x,), vjp)


def softmax_lastdim(x, additive_mask=None) -> Tensor:
    """Softmax over the last dimension with optional additive pre-softmax mask.

    Computed with max-subtraction. The mask broadcasts against the scores;
    gradient flows into both operands. Rows must not be entirely -inf.
    """
    x = astensor(x)
    if additive_mask is not None:
        m = astensor(additive_mask)
        _broadcast_check(x, m, "softmax_lastdim")
        scores = x.data + m.data
        parents: tuple[Tensor, ...] = (x, m)
    else:
        scores = x.data
        parents = (x,)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        ds = out * (g - (g * out).sum(axis=-1, keepdims=True))
        if additive_mask is None:
            return (_unbroadcast(ds, x.shape),)
        return _unbroadcast(ds, x.shape), _unbroadcast(ds, parents[1].shape)

    return Tensor._result(out, parents, vjp)


# --- composite ops ----------------------------------------------------------

_SQRT2 = math.sqrt(2.0)


def gelu(x) -> Tensor:
    """Exact erf-based GELU: x * Phi(x)."""
    x = astensor(x)
    return x * ((erf(x / _SQRT2) + 1.0) * 0.5)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then apply the affine map."""
    x = astensor(x)
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    inv = power(var + eps, -0.5)
    return centered * inv * astensor(gain) + astensor(bias)


# --- losses ----------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def l1_loss(pred, target) -> Tensor:
    pred, target = astensor(pred), astensor(target)
    _check_same_shape(pred, target, "l1_loss")
    return tmean(absolute(pred - target))


def mse_loss(pred, target) -> Tensor:
    pred, target = astensor(pred), astensor(target)
    _check_same_shape(pred, target, "mse_loss")
    diff = pred - target
    return tmean(diff * diff)


def bce_with_logits_loss(logits, targets) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-safe form
    max(z, 0) - z*t + log(1 + exp(-|z|))."""
    z, t = astensor(logits), astensor(targets)
    _check_same_shape(z, t, "bce_with_logits_loss")
    per_element = maximum_scalar(z, 0.0) - z * t + log(exp(-absolute(z)) + 1.0)
    return tmean(per_element)


def cosine_similarity_loss(pred, target) -> Tensor:
    """Mean over rows of (1 - cosine similarity) between 2-d row sets."""
    p, t = astensor(pred), astensor(target)
    _check_same_shape(p, t, "cosine_similarity_loss")
    if p.ndim != 2:
        raise ShapeMismatch(f"cosine_similarity_loss expects 2-d rows, got {p.shape}")
    for name, arr in (("pred", p.data), ("target", t.data)):
        if np.any((arr * arr).sum(axis=-1) == 0.0):
            raise DegenerateVector(f"zero-norm row in {name}")
    dot = tsum(p * t, axis=-1)
    norms = power(tsum(p * p, axis=-1), 0.5) * power(tsum(t * t, axis=-1), 0.5)
    return tmean(1.0 - dot / norms)
