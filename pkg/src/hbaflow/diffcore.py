"""Minimal reverse-mode differentiable array engine.

Every value is a float64 numpy array wrapped in :class:`Array`. Operations on
arrays that require gradients record a node (op name, parents, vector-Jacobian
product) on the output. :func:`backward` collects the nodes reachable from a
scalar loss into a :class:`Tape`, ordered by creation id, and replays it in
reverse.

Only the primitives the flow model needs are provided.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Array", "Tape", "ShapeError", "ContractError", "as_array", "constant",
    "add", "sub", "mul", "div", "neg", "exp", "log", "tanh", "sigmoid",
    "affine", "conv1d", "concat", "reshape", "clip", "sum", "mean",
    "backward", "finite_diff_gradient",
]

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Array:
    """Immutable float64 value, optionally tracked for differentiation."""

    __slots__ = ("value", "requires_grad", "id", "_node")
    __array_priority__ = 100  # make ndarray <op> Array dispatch to Array

    def __init__(self, value, requires_grad: bool = False, _node=None, _fresh=False):
        if _fresh and isinstance(value, np.ndarray) and value.dtype == np.float64:
            v = value
        else:
            v = np.array(value, dtype=np.float64)
        v.setflags(write=False)
        self.value = v
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self._node = _node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array({self.value!r}{flag})"

    def __len__(self) -> int:
        return len(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


@dataclass
class _Node:
    op: str
    parents: tuple[Array, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Creation-ordered record of the operations reachable from a loss."""

    entries: list[Array] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Array) -> "Tape":
        seen: dict[int, Array] = {}
        stack = [loss]
        while stack:
            a = stack.pop()
            if a.id in seen or not a.requires_grad:
                continue
            seen[a.id] = a
            if a._node is not None:
                stack.extend(a._node.parents)
        return cls(sorted(seen.values(), key=lambda a: a.id))

    def __len__(self) -> int:
        return len(self.entries)


def as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


constant = as_array


def _record(op: str, value: np.ndarray, parents: tuple[Array, ...], vjp) -> Array:
    if any(p.requires_grad for p in parents):
        return Array(value, True, _Node(op, parents, vjp), _fresh=True)
    return Array(value, _fresh=True)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Array, b: Array) -> None:
    for m, n in zip(reversed(a.shape), reversed(b.shape)):
        if m != n and m != 1 and n != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _check_broadcast("add", a, b)
    return _record("add", a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _check_broadcast("sub", a, b)
    return _record("sub", a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _check_broadcast("mul", a, b)
    return _record("mul", a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape),
                              _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _check_broadcast("div", a, b)
    out = a.value / b.value

    def vjp(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * out / b.value, b.shape))

    return _record("div", out, (a, b), vjp)


# -- elementwise unary -------------------------------------------------------

def neg(a) -> Array:
    a = as_array(a)
    return _record("neg", -a.value, (a,), lambda g: (-g,))


def exp(a) -> Array:
    a = as_array(a)
    out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Array:
    a = as_array(a)
    return _record("log", np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a) -> Array:
    a = as_array(a)
    out = np.tanh(a.value)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(v, dtype=np.float64))


def sigmoid(a) -> Array:
    a = as_array(a)
    out = _sigmoid(a.value)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float, hi: float) -> Array:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    a = as_array(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _record("clip", np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


# -- linear maps -------------------------------------------------------------

def affine(x, w, b=None) -> Array:
    """``x @ w + b`` over the last axis of ``x``."""
    x, w = as_array(x), as_array(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: incompatible shapes {x.shape} and {w.shape}")
    out = x.value @ w.value
    parents: tuple[Array, ...] = (x, w)
    if b is not None:
        b = as_array(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"affine: bias shape {b.shape} does not match {w.shape}")
        out = out + b.value
        parents = (x, w, b)

    def vjp(g):
        gx = g @ w.value.T
        gw = x.value.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, w.shape[1]).sum(axis=0)

    return _record("affine", out, parents, vjp)


def conv1d(x, w, b=None, dilation: int = 1) -> Array:
    """Non-causal dilated 1-D convolution with length-preserving zero padding.

    ``x`` has shape (batch, time, in_channels) and ``w`` (kernel, in, out).
    """
    x, w = as_array(x), as_array(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    if dilation < 1:
        raise ContractError(f"conv1d: dilation must be >= 1, got {dilation}")
    k, cin, cout = w.shape
    B, T, _ = x.shape
    total = dilation * (k - 1)
    left = total // 2
    xp = np.zeros((B, T + total, cin))
    xp[:, left:left + T] = x.value
    # taps that only ever read padding contribute nothing
    live = [j for j in range(k) if abs(j * dilation - left) < T]
    cols = np.concatenate([xp[:, j * dilation:j * dilation + T] for j in live], axis=-1)
    wl = w.value[live].reshape(len(live) * cin, cout)
    out = cols @ wl
    parents: tuple[Array, ...] = (x, w)
    if b is not None:
        b = as_array(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv1d: bias shape {b.shape} does not match {w.shape}")
        out += b.value
        parents = (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gcols = g @ wl.T
        gxp = np.zeros_like(xp)
        for i, j in enumerate(live):
            gxp[:, j * dilation:j * dilation + T] += gcols[..., i * cin:(i + 1) * cin]
        gw = np.zeros_like(w.value)
        gw[live] = (cols.reshape(-1, len(live) * cin).T @ g2).reshape(len(live), cin, cout)
        gx = gxp[:, left:left + T]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record("conv1d", out, parents, vjp)


# -- structure ---------------------------------------------------------------

def concat(arrays: Sequence, axis: int = -1) -> Array:
    arrays = [as_array(a) for a in arrays]
    try:
        out = np.concatenate([a.value for a in arrays], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[a.shape for a in arrays]}: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [a.shape[ax] for a in arrays])

    def vjp(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return parts

    return _record("concat", out, tuple(arrays), vjp)


def getitem(a, idx) -> Array:
    """Basic (slice/int/ellipsis) indexing, e.g. stride-2 slicing along time."""
    a = as_array(a)
    out = a.value[idx]

    def vjp(g):
        full = np.zeros(a.shape)
        full[idx] += g
        return (full,)

    return _record("getitem", out, (a,), vjp)


def reshape(a, shape: Sequence[int]) -> Array:
    a = as_array(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def sum(a, axis=None, keepdims: bool = False) -> Array:  # noqa: A001
    a = as_array(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Array:
    a = as_array(a)
    n = a.value.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) / float(n)


# -- reverse pass ------------------------------------------------------------

def backward(loss: Array) -> dict[int, np.ndarray]:
    """Gradient of a scalar loss with respect to every tracked leaf.

    Returns a map from node id to gradient. Leaves that the loss does not
    depend on are absent; callers should treat them as zero.
    """
    if not isinstance(loss, Array) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward: loss must be a scalar Array, got shape {shape}")
    if not loss.requires_grad:
        return {}
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    leaves: dict[int, np.ndarray] = {}
    for a in reversed(tape.entries):
        g = grads.pop(a.id, None)
        if g is None:
            continue
        if a._node is None:
            leaves[a.id] = g
            continue
        for p, gp in zip(a._node.parents, a._node.vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + gp
            else:
                grads[p.id] = gp
    return leaves


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, used as a test oracle."""
    if h <= 0:
        raise ContractError(f"finite_diff_gradient: step must be positive, got {h}")
    x = np.array(x.value if isinstance(x, Array) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(np.asarray(_scalar(f(x.copy()))))
        flat[i] = orig - h
        fm = float(np.asarray(_scalar(f(x.copy()))))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def _scalar(v):
    return v.value if isinstance(v, Array) else v
