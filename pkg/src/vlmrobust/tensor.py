"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive computes its value eagerly with numpy and, when any operand
requires a gradient, records a closure that maps the output gradient to the
operand gradients. ``backward`` walks the recorded graph in reverse
topological order.

Broadcasting is limited to a leading batch: the second operand of an
elementwise op may have a shape equal to a suffix of the first operand's
shape (a bias or a scalar gate), nothing else.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Tensor:
    """An immutable float64 array that may carry a recorded gradient path."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.size == 0:
            raise ValueError(f"{op}: empty tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


# ---------------------------------------------------------------- elementwise

def _suffix_broadcast(op: str, a: Tensor, b: Tensor) -> int:
    """Number of leading axes of ``a`` that ``b`` is broadcast over."""
    if a.shape == b.shape:
        return 0
    nb = b.ndim
    if nb <= a.ndim and a.shape[a.ndim - nb:] == b.shape:
        return a.ndim - nb
    raise ShapeError(op, a.shape, b.shape)


def _reduce_lead(g: np.ndarray, lead: int) -> np.ndarray:
    if lead == 0:
        return g
    return g.sum(axis=tuple(range(lead)))


def add(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim > a.ndim:
        return add(b, a)
    lead = _suffix_broadcast("add", a, b)

    def backward(g):
        return (g if a.requires_grad else None,
                _reduce_lead(g, lead) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim > a.ndim:
        return scale(sub(b, a), -1.0)
    lead = _suffix_broadcast("subtract", a, b)

    def backward(g):
        return (g if a.requires_grad else None,
                -_reduce_lead(g, lead) if b.requires_grad else None)

    return _result(a.data - b.data, (a, b), backward, "subtract")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    if b.ndim > a.ndim:
        return mul(b, a)
    lead = _suffix_broadcast("multiply", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd if a.requires_grad else None,
                _reduce_lead(g * ad, lead) if b.requires_grad else None)

    return _result(ad * bd, (a, b), backward, "multiply")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), backward, "gelu")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or ``(..., m, k) @ (..., k, n)`` with equal leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matrix-multiply", a.shape, b.shape)
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matrix-multiply", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matrix-multiply")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concatenate: no operands")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concatenate", ref, t.shape)
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, sizes, axis=ax)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                   backward, "concatenate")


def slice_(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if out.size == 0:
        raise ValueError(f"slice: empty result for shape {a.shape}")
    out = np.array(out, dtype=DTYPE)
    src_shape = a.shape

    def backward(g):
        full = np.zeros(src_shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), backward, "slice")


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` (V, d) at integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError("embedding-gather", weight.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding-gather: id out of range for table {weight.shape}")
    V, d = weight.shape

    def backward(g):
        flat = ids.reshape(-1)
        gw = np.zeros((V, d), dtype=DTYPE)
        np.add.at(gw, flat, g.reshape(-1, d))
        return (gw,)

    return _result(weight.data[ids], (weight,), backward, "embedding-gather")


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None) -> Tensor:
    src = a.shape
    out = np.sum(a.data, axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    src = a.shape
    out = np.mean(a.data, axis=axis)
    count = a.data.size / out.size

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _result(out, (a,), backward, "mean")


# ---------------------------------------------------------------- normalisation

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log-softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply an affine map."""
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer-normalize", x.shape, weight.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data
    lead = x.ndim - 1

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gh = g * weight.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if weight.requires_grad:
            gw = _reduce_lead(g * xhat, lead)
        if bias.requires_grad:
            gb = _reduce_lead(g, lead)
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward, "layer-normalize")


# ---------------------------------------------------------------- attention

def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``q`` is (..., Tq, dh), ``k`` and ``v`` are (..., Tk, dh). ``mask`` is a
    boolean array broadcastable to (..., Tq, Tk); False entries get zero
    weight. Every query row must keep at least one key.
    """
    if (q.shape[:-2] != k.shape[:-2] or k.shape != v.shape
            or q.shape[-1] != k.shape[-1]):
        raise ShapeError("scaled-dot-product-attention", q.shape, k.shape, v.shape)
    c = 1.0 / math.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * c
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask.any(axis=-1)):
            raise ValueError("scaled-dot-product-attention: a query row has no visible key")
        scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    p = e / e.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def backward(g):
        gq = gk = gv = None
        if v.requires_grad:
            gv = np.swapaxes(p, -1, -2) @ g
        if q.requires_grad or k.requires_grad:
            gp = g @ np.swapaxes(v.data, -1, -2)
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * c
            if q.requires_grad:
                gq = gs @ k.data
            if k.requires_grad:
                gk = np.swapaxes(gs, -1, -2) @ q.data
        return gq, gk, gv

    return _result(out, (q, k, v), backward, "scaled-dot-product-attention")


# ---------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``targets`` under ``logits`` (N, V).

    Fused with a max-shifted log-softmax. ``reduction`` is one of
    ``"mean"``, ``"sum"`` or ``"none"`` (per-row losses).
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("cross-entropy-from-logits", logits.shape, targets.shape)
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise IndexError("cross-entropy-from-logits: target class out of range")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    losses = -logp[rows, targets]
    if reduction == "none":
        out = losses
    elif reduction == "sum":
        out = losses.sum()
    elif reduction == "mean":
        out = losses.mean()
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        if reduction == "none":
            return (p * g[:, None],)
        if reduction == "mean":
            return (p * (g / n),)
        return (p * g,)

    return _result(np.asarray(out), (logits,), backward, "cross-entropy-from-logits")


# ---------------------------------------------------------------- differentiation

class GradientRecord:
    """Gradients of one scalar with respect to the leaves that required them.

    Looking up a tensor that was not on any path to the loss gives zeros of
    its shape.
    """

    def __init__(self, grads: dict):
        self._grads = grads  # id(tensor) -> (tensor, ndarray)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        hit = self._grads.get(id(t))
        if hit is not None and hit[0] is t:
            return hit[1]
        return np.zeros(t.shape, dtype=DTYPE)

    def __contains__(self, t: Tensor) -> bool:
        hit = self._grads.get(id(t))
        return hit is not None and hit[0] is t

    def __len__(self):
        return len(self._grads)

    def tensors(self) -> list:
        return [t for t, _ in self._grads.values()]


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> GradientRecord:
    """Reverse-mode gradients of scalar ``loss`` for every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss was not produced by recorded operations")
    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = (node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return GradientRecord(leaves)


def finite_difference_gradient(f: Callable[[Tensor], Tensor | float], x: Tensor | np.ndarray,
                               h: float = 1e-5, coords: Iterable | None = None) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``.

    ``coords`` restricts the estimate to some flat indices; the rest stay 0.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords

    def evaluate(arr):
        with no_grad():
            val = f(Tensor(arr))
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not math.isfinite(val):
            raise FloatingPointError("finite difference: objective is not finite")
        return val

    for i in idx:
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        grad[i] = (evaluate(plus.reshape(base.shape)) - evaluate(minus.reshape(base.shape))) / (2 * h)
    return grad.reshape(base.shape)
