"""Dense float64 tensors with a reverse-mode tape.

Every op that touches a tensor with ``requires_grad`` records a node holding
its parents and a backward closure. Nodes get a monotonically increasing id
at creation, so creation order is a topological order of the record and
``backward`` simply walks the reachable nodes by descending id.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np


class NumericError(ArithmeticError):
    """A NaN or Inf appeared in a tensor."""


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires grad")
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            nodes[t._id] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        grads: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            t = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if t._backward is None:
                # leaf
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    _check_finite(data, op)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not np.all(b.data != 0):
        raise NumericError("division by zero")

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / b.data**2, b.shape) if b.requires_grad else None,
        )

    return _result(a.data / b.data, (a, b), bw, "div")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _result(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # reported by the finiteness check instead
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _result(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")

    def bw(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), bw, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _result(out, (a,), bw, "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), bw, "sigmoid")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def bw(g):
        return (g * pos,)

    return _result(a.data * pos, (a,), bw, "relu")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bw(g):
        return (g * sign,)

    return _result(np.abs(a.data), (a,), bw, "abs")


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _result(np.where(pick_a, a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _result(np.where(pick_a, a.data, b.data), (a, b), bw, "minimum")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        return (g * inside,)

    return _result(np.clip(a.data, lo, hi), (a,), bw, "clip")


def scale_no_grad(a: Tensor, factor: np.ndarray) -> Tensor:
    """``a * factor`` where ``factor`` is constant guidance (no gradient)."""
    return mul(a, Tensor(factor))


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _result(a.data.transpose(axes), (a,), bw, "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (a,), bw, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def broadcast_to(a: Tensor, shape) -> Tensor:
    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), bw, "broadcast_to")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, -1)), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (-1, 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- fused ops

def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    if np.isnan(x).any():
        raise NumericError("softmax of NaN input")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = softmax_np(a.data, axis)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw, "log_softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        n = a.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),) if n else (g,)

    return _result(xhat, (a,), bw, "layer_norm")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    x = logits.data
    out = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        return (g * (_sigmoid(x) - y),)

    return _result(np.broadcast_to(out, np.broadcast(x, y).shape), (logits,), bw, "bce_with_logits")


def logsumexp(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """log(sum(exp(a))) over ``axis``, restricted to ``mask`` entries when given."""
    x = a.data if mask is None else np.where(mask, a.data, -np.inf)
    c = x.max(axis=axis, keepdims=True)
    w = np.exp(x - c)
    s = w.sum(axis=axis, keepdims=True)
    out = (np.log(s) + c).squeeze(axis)

    def bw(g):
        return (np.expand_dims(g, axis) * w / s,)

    return _result(out, (a,), bw, "logsumexp")
