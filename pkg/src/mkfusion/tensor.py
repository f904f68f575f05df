"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a floating-point numpy array.  Operations performed
while a :class:`Tape` is active, and touching at least one tensor with
``requires_grad=True``, are appended to that tape together with a closure
that maps the output gradient to the input gradients.  ``Tape.backward``
replays the records in reverse order exactly once.

Example
-------
>>> w = Tensor(np.array([3.0], np.float32), requires_grad=True)
>>> with Tape() as tape:
...     y = w * 2.0
...     tape.backward(y.sum())
>>> w.grad
array([2.], dtype=float32)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, ShapeError, StateError

__all__ = [
    "Tensor",
    "Tape",
    "PartialGrad",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "absolute",
    "mean",
    "sum_",
    "reshape",
    "transpose",
    "concat",
    "take",
    "prefix",
    "broadcast_to",
    "linear",
    "softmax",
]

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Floating-point array with an optional gradient buffer.

    Image-like tensors use the ``(n, c, h, w)`` layout throughout the
    package.  ``grad`` has the same shape as ``data`` once populated;
    ``grad_mask`` records which elements were reached by the last backward
    pass (``None`` means all of them).
    """

    __slots__ = ("data", "grad", "grad_mask", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.grad: np.ndarray | None = None
        self.grad_mask: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None
        self.grad_mask = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class PartialGrad:
    """Gradient that only covers the elements selected by ``mask``."""

    grad: np.ndarray
    mask: np.ndarray


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence]
    op: str


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest per thread and independent tapes
    may live on different threads.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()
        self.visited = 0

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward, op: str) -> None:
        self.records.append(_Record(out, tuple(parents), backward, op))
        self._produced.add(id(out))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Propagate ``grad`` (default: ones) from ``loss`` to every leaf.

        Leaf tensors with ``requires_grad`` accumulate into ``.grad``.
        """
        if not loss.requires_grad:
            raise StateError("loss does not depend on any tensor that requires grad")
        if grad is None:
            grad = np.ones_like(loss.data)
        elif np.shape(grad) != loss.shape:
            raise ShapeError(f"seed gradient shape {np.shape(grad)} != loss shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        if id(loss) not in self._produced:
            _accumulate_leaf(loss, pending.pop(id(loss)))
            return
        self.visited = 0
        for rec in reversed(self.records):
            self.visited += 1
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            grads = rec.backward(g)
            for parent, pg in zip(rec.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in self._produced:
                    if isinstance(pg, PartialGrad):
                        pg = pg.grad
                    prev = pending.get(id(parent))
                    pending[id(parent)] = pg if prev is None else prev + pg
                else:
                    _accumulate_leaf(parent, pg)


def _accumulate_leaf(t: Tensor, g) -> None:
    mask = None
    if isinstance(g, PartialGrad):
        g, mask = g.grad, g.mask
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = g.copy()
        t.grad_mask = None if mask is None else mask.copy()
        return
    t.grad = t.grad + g
    if t.grad_mask is not None:
        t.grad_mask = None if mask is None else (t.grad_mask | mask)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        tape.record(out, parents, backward, op)
        return out
    return Tensor(data)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    """Rectified linear unit; the derivative at exactly zero is taken as 0."""
    out = np.maximum(a.data, 0).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * (a.data > 0),), "relu")


def absolute(a: Tensor) -> Tensor:
    """``|a|`` with subgradient 0 at 0."""
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


# --- reductions and shape ----------------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = np.asarray(a.data.mean(axis=axis), dtype=a.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / a.dtype.type(count), a.shape).astype(a.dtype),)

    return _make(out, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ArgumentError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(out, tensors, backward, "concat")


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather ``indices`` along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    out = np.take(a.data, idx, axis=ax)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(full, ax, 0)
        g_moved = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, g_moved)
        return (full,)

    return _make(out, (a,), backward, "take")


def prefix(a: Tensor, length: int, axis: int) -> Tensor:
    """First ``length`` entries along ``axis``.

    The gradient reaching ``a`` is tagged with the covered region, so leaf
    parameters record which slabs a backward pass actually touched.
    """
    ax = axis % a.ndim
    if not 1 <= length <= a.shape[ax]:
        raise ArgumentError(f"prefix length {length} outside [1, {a.shape[ax]}]")
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(0, length)
    sl = tuple(sl)
    out = a.data[sl].copy()

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[sl] = g
        mask = np.zeros(a.shape, dtype=bool)
        mask[sl] = True
        return (PartialGrad(full, mask),)

    return _make(out, (a,), backward, "prefix")


# --- dense layers --------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` on a ``(rows, in_dim)`` matrix."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, backward, "linear")


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    if v.data.size == 0 or v.shape[axis] == 0:
        raise ArgumentError("softmax of an empty vector")
    z = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (v,), backward, "softmax")
