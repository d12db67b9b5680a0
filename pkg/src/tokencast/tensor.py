"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations executed inside an active Tape are recorded in execution order;
Tape.backward walks the record list once, in reverse, accumulating grads
with += so a tensor used twice receives the sum of both contributions.
Outside a tape every op is forward-only, which is what inference wants.

A Tape and the tensors recorded on it belong to one thread. Independent
model instances may run on separate threads, each with its own tape.
"""

from __future__ import annotations

import threading

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_LOCAL = threading.local()


def _active_tape():
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Ordered record of operations, replayed in reverse by backward()."""

    def __init__(self):
        self._records = []
        self._outer = None

    def __enter__(self):
        self._outer = _active_tape()
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _LOCAL.tape = self._outer
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, inputs, pull):
        self._records.append((out, inputs, pull))

    def backward(self, loss: "Tensor") -> None:
        """Populate .grad on every recorded tensor that requires it.

        The loss must be a single-element tensor produced under this tape.
        """
        if loss.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar loss, got shape {loss.data.shape}"
            )
        loss._ensure_grad()
        loss.grad[...] = 1.0
        for out, inputs, pull in reversed(self._records):
            if out.grad is None:
                # Not on the path to the loss: contributes zero gradient,
                # but inputs still get buffers so grads are always populated.
                for t in inputs:
                    if t.requires_grad:
                        t._ensure_grad()
                continue
            grads = pull(out.grad)
            for t, g in zip(inputs, grads):
                if not t.requires_grad or g is None:
                    continue
                t._ensure_grad()
                t.grad += g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; scalars fold into scale/shift
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
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _emit(data, inputs, pull) -> Tensor:
    """Create the output tensor, recording the op if a tape is active."""
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    tape = _active_tape()
    if req and tape is not None:
        tape.record(out, inputs, pull)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e

    def pull(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(data, (a, b), pull)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from e

    def pull(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(data, (a, b), pull)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from e
    ad, bd = a.data, b.data

    def pull(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _emit(data, (a, b), pull)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from e
    ad, bd = a.data, b.data

    def pull(g):
        ga = _unbroadcast(g / bd, a.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), b.shape)
        return ga, gb

    return _emit(data, (a, b), pull)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def pull(g):
        return (g * c,)

    return _emit(a.data * c, (a,), pull)


def silu(a: Tensor) -> Tensor:
    x = a.data
    flat = x.reshape(-1)
    data = kernels.silu(flat).reshape(x.shape)

    def pull(g):
        return (kernels.silu_grad(flat, np.ascontiguousarray(g).reshape(-1)).reshape(x.shape),)

    return _emit(data, (a,), pull)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def pull(g):
        return (g * (1.0 - y * y),)

    return _emit(y, (a,), pull)


def square(a: Tensor) -> Tensor:
    x = a.data

    def pull(g):
        return (g * (2.0 * x),)

    return _emit(x * x, (a,), pull)


def absolute(a: Tensor) -> Tensor:
    x = a.data

    def pull(g):
        return (g * np.sign(x),)

    return _emit(np.abs(x), (a,), pull)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); subgradient 0 where the clamp is active."""
    x = a.data
    floor = float(floor)

    def pull(g):
        return (g * (x > floor),)

    return _emit(np.maximum(x, floor), (a,), pull)


# -------------------------------------------------------------- reductions


def total(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over all elements or along one axis."""
    x = a.data
    data = x.sum(axis=axis, keepdims=keepdims)

    def pull(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.shape).copy(),)

    return _emit(data, (a,), pull)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    if axis is None:
        count = x.size
    else:
        count = x.shape[axis]
    data = x.mean(axis=axis, keepdims=keepdims)

    def pull(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / count, x.shape).copy(),)

    return _emit(data, (a,), pull)


# ------------------------------------------------------------------ linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2Dx2D, 3Dx2D (stacked rows) and 3Dx3D (batched)."""
    ad, bd = a.data, b.data
    na, nb = ad.ndim, bd.ndim
    if (na, nb) not in ((2, 2), (3, 2), (3, 3)):
        raise ShapeError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
    if (na, nb) == (3, 3) and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul: batch dims differ, {ad.shape} @ {bd.shape}")
    data = ad @ bd

    def pull(g):
        if (na, nb) == (2, 2):
            return g @ bd.T, ad.T @ g
        if (na, nb) == (3, 2):
            k = ad.shape[-1]
            p = bd.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, p)
            return g @ bd.T, gb
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _emit(data, (a, b), pull)


def take_rows(a: Tensor, ids) -> Tensor:
    """Gather rows of a 2D tensor by integer index; repeats accumulate grads."""
    ids = np.asarray(ids, dtype=np.int64)
    if a.ndim != 2:
        raise ShapeError(f"take_rows: expected 2D table, got {a.shape}")
    rows = a.data[ids]

    def pull(g):
        gt = np.zeros_like(a.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit(rows, (a,), pull)


# ----------------------------------------------------------- restructuring


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def pull(g):
        pieces = []
        for i in range(len(sizes)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return _emit(data, tuple(tensors), pull)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        if a.ndim != 2:
            raise ShapeError(f"transpose: default swap needs 2D, got {a.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def pull(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,), pull)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape

    def pull(g):
        return (g.reshape(orig),)

    return _emit(a.data.reshape(shape), (a,), pull)


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing only. The result is a copy; backward scatters into zeros."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice):
            raise ShapeError("slice: only slice objects are supported (no ints/arrays)")
    if len(key) > a.ndim:
        raise ShapeError(f"slice: too many axes for shape {a.shape}")
    data = a.data[key]

    def pull(g):
        gt = np.zeros_like(a.data)
        gt[key] = g
        return (gt,)

    return _emit(data, (a,), pull)


# ------------------------------------------------------------ normalizers


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    ax = axis % x.ndim
    moved = np.moveaxis(x, ax, -1)
    flat = np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))
    yflat = kernels.softmax_rows(flat)
    data = np.moveaxis(yflat.reshape(moved.shape), -1, ax)

    def pull(g):
        gm = np.ascontiguousarray(np.moveaxis(g, ax, -1).reshape(flat.shape))
        gx = kernels.softmax_rows_grad(yflat, gm)
        return (np.ascontiguousarray(np.moveaxis(gx.reshape(moved.shape), -1, ax)),)

    return _emit(data, (a,), pull)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS-normalize the last axis and scale by a learned gain vector."""
    d = x.data.shape[-1]
    if weight.data.shape != (d,):
        raise ShapeError(f"rmsnorm: weight shape {weight.shape} does not match last axis {d}")
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    yflat, inv = kernels.rmsnorm_rows(flat, weight.data, float(eps))
    data = yflat.reshape(x.data.shape)

    def pull(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        gx, gw = kernels.rmsnorm_rows_grad(flat, weight.data, inv, g2)
        return gx.reshape(x.data.shape), gw

    return _emit(data, (x, weight), pull)
