"""Tape-based reverse-mode differentiation over dense numpy arrays.

Operations on :class:`Tensor` values execute eagerly.  While a :class:`Tape`
is active, every primitive whose inputs include a tracked tensor appends a
record (output, inputs, vector-Jacobian product) to it; :func:`backward`
replays the records in reverse.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(tape, loss)[w]
    array([2., 2., 2.])
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_TAPES: list = []


class ShapeError(ValueError):
    pass


@dataclass
class Record:
    out: "Tensor"
    inputs: tuple
    vjp: Callable


class Tape:
    """Append-only log of primitive applications, in execution order."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)


def _active():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)
    size = property(lambda self: self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar -------------------------------------------------------
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __getitem__(self, key): return slice_(self, key)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self): return transpose(self)


def astensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None and like.dtype.kind == "f" else None
    arr = np.asarray(x)
    if dtype is not None and arr.dtype.kind in "fiub":
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, astensor(b, a)
    b = astensor(b)
    return astensor(a, b), b


def _emit(data, inputs, vjp) -> Tensor:
    tracked = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    tape = _active()
    if tracked and tape is not None:
        tape.records.append(Record(out, tuple(inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for k, n in enumerate(shape):
        if n == 1 and g.shape[k] != 1:
            g = g.sum(axis=k, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[0]:
        return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, np.outer(a.data, g)))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# shape and indexing


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in tensors]
    ref = next((t for t in ts if t.dtype.kind == "f"), ts[0])
    ts = [astensor(t.data, ref) if not t.requires_grad else t for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(ts))
        )

    return _emit(out, ts, vjp)


def slice_(x, key) -> Tensor:
    x = astensor(x)
    out = x.data[key]
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis for k in parts)

    def vjp(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _emit(out, (x,), vjp)


def gather(x, index, axis: int = 0) -> Tensor:
    """Rows (or entries along ``axis``) of ``x`` selected by an integer index array."""
    x = astensor(x)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < -x.shape[axis] or index.max() >= x.shape[axis]):
        raise ShapeError(f"gather: index out of range for axis {axis} of shape {x.shape}")
    out = np.take(x.data, index, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        if axis in (0, -x.ndim):
            np.add.at(gx, index, g)
        else:
            gm = np.moveaxis(gx, axis, 0)
            np.add.at(gm, index, np.moveaxis(g, axis, 0))
        return (gx,)

    return _emit(out, (x,), vjp)


def scatter_add(src, index, n: int, axis: int = 0) -> Tensor:
    """Sum entries of ``src`` into ``n`` slots along ``axis`` according to ``index``."""
    src = astensor(src)
    index = np.asarray(index, dtype=np.intp)
    if index.shape[0] != src.shape[axis]:
        raise ShapeError(f"scatter_add: index length {index.shape[0]} does not match axis {axis} of {src.shape}")
    shape = list(src.shape)
    shape[axis] = n
    out = np.zeros(shape, dtype=src.dtype)
    if axis in (0, -src.ndim):
        np.add.at(out, index, src.data)
    else:
        np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(src.data, axis, 0))
    return _emit(out, (src,), lambda g: (np.take(g, index, axis=axis),))


def reshape(x, shape) -> Tensor:
    x = astensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = astensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _emit(out, (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape) -> Tensor:
    x = astensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from None
    return _emit(np.array(out), (x,), lambda g: (_unbroadcast(g, x.shape),))


# ---------------------------------------------------------------------------
# reductions


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = astensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(out, (x,), vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = astensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# elementwise unary


def _unary(x, fwd, dfdx) -> Tensor:
    x = astensor(x)
    out = fwd(x.data)
    return _emit(out, (x,), lambda g: (g * dfdx(x.data, out),))


def square(x): return _unary(x, np.square, lambda a, y: 2.0 * a)
def sin(x): return _unary(x, np.sin, lambda a, y: np.cos(a))
def cos(x): return _unary(x, np.cos, lambda a, y: -np.sin(a))
def exp(x): return _unary(x, np.exp, lambda a, y: y)
def log(x): return _unary(x, np.log, lambda a, y: 1.0 / a)
def tanh(x): return _unary(x, np.tanh, lambda a, y: 1.0 - y * y)
def sigmoid(x): return _unary(x, lambda a: 0.5 * (1.0 + np.tanh(0.5 * a)), lambda a, y: y * (1.0 - y))


def abs_(x):
    # subgradient 0 at the kink
    return _unary(x, np.abs, lambda a, y: np.sign(a))


def max_with_zero(x):
    return _unary(x, lambda a: np.maximum(a, 0.0), lambda a, y: (a > 0).astype(a.dtype))


relu = max_with_zero


def sqrt(x):
    def d(a, y):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(y > 0, 0.5 / y, 0.0)

    return _unary(x, np.sqrt, d)


def leaky_relu(x, slope: float = 0.2):
    return _unary(x, lambda a: np.where(a > 0, a, slope * a), lambda a, y: np.where(a > 0, 1.0, slope).astype(a.dtype))


# ---------------------------------------------------------------------------
# attention normalisers


def masked_softmax(x, mask=None, axis: int = -1) -> Tensor:
    """softmax(x + mask) along ``axis``; ``mask`` is additive (0 or -inf/-large)."""
    x = astensor(x)
    z = x.data if mask is None else x.data + np.asarray(mask, dtype=x.dtype)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _emit(y, (x,), vjp)


def segment_softmax(x, segment, n_segments: int) -> Tensor:
    """Softmax of ``x`` rows grouped by ``segment`` (e.g. incoming edges per node).

    ``x`` has shape (E, ...) and ``segment`` (E,) gives each row's group.
    """
    x = astensor(x)
    segment = np.asarray(segment, dtype=np.intp)
    if segment.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_softmax: {segment.shape[0]} segment ids for {x.shape[0]} rows")
    smax = np.full((n_segments,) + x.shape[1:], -np.inf, dtype=x.dtype)
    np.maximum.at(smax, segment, x.data)
    e = np.exp(x.data - smax[segment])
    denom = np.zeros_like(smax)
    np.add.at(denom, segment, e)
    y = e / denom[segment]

    def vjp(g):
        s = np.zeros_like(smax)
        np.add.at(s, segment, g * y)
        return (y * (g - s[segment]),)

    return _emit(y, (x,), vjp)


# ---------------------------------------------------------------------------


def backward(tape: Tape, output: Tensor, params=None) -> dict:
    """Gradients of scalar ``output`` w.r.t. tracked leaves (or ``params``).

    Returns a dict keyed by tensor; leaves with no path to the output get an
    all-zero gradient.
    """
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    grads = {id(output): np.ones_like(output.data)}
    produced = set()
    leaves = {}
    for rec in reversed(tape.records):
        produced.add(id(rec.out))
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            leaves.setdefault(key, inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
    if params is None:
        params = [t for k, t in leaves.items() if k not in produced]
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}
