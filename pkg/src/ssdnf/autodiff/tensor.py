"""Dense tensors recorded on an explicit, define-by-run gradient tape.

Usage::

    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    grads = tape.backward(loss)
    grads[x]  # -> array([2., 2., 2.])

Every op checks for an active tape; when one exists and any input is
differentiable, the op appends an entry holding its inputs, output and a
backward closure. Entries are appended in execution order, so walking the
list backwards is a valid reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()
_DEFAULT_DTYPE = [np.float32]


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}")


class TapeError(RuntimeError):
    pass


def default_dtype():
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE[0] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float dtype (e.g. to float64 for gradient checks)."""
    old = _DEFAULT_DTYPE[0]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE[0] = old


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradMap:
    """Gradients keyed by tensor identity; tensors never reached map to zeros."""

    def __init__(self, grads: dict, owners: dict):
        self._grads = grads
        self._owners = owners

    def __getitem__(self, t: "Tensor") -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._owners.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: "Tensor") -> bool:
        return id(t) in self._grads and self._owners.get(id(t)) is t

    def get(self, t: "Tensor", default=None):
        return self[t] if t in self else default


class Tape:
    """Ordered record of differentiable ops; single use."""

    def __init__(self):
        self.entries: list[tuple] = []
        self._outputs: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            raise TapeError("tapes must be exited in LIFO order")

    def record(self, out: "Tensor", inputs: Sequence["Tensor"], backward: Callable) -> None:
        if self._consumed:
            raise TapeError("cannot record on a tape that has already been backpropagated")
        self.entries.append((out, tuple(inputs), backward))
        self._outputs.add(id(out))

    def backward(self, loss: "Tensor", seed: float | np.ndarray = 1.0) -> GradMap:
        """Reverse-mode sweep from ``loss``; returns gradients for every differentiable tensor."""
        if self._consumed:
            raise TapeError("backward already ran on this tape; re-record the forward pass")
        if loss.data.size != 1:
            raise ShapeError("backward (loss must be scalar)", loss.shape)
        if id(loss) not in self._outputs:
            raise TapeError("loss was not recorded on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, seed, dtype=loss.data.dtype)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, fn in reversed(self.entries):
            g = grads.get(id(out))
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = t
        # intermediate results stay in the map; they are harmless and useful for debugging
        self.entries = []
        return GradMap(grads, owners)


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype or default_dtype())


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or default_dtype()), requires_grad=requires_grad)


def _lift(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _emit(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return _emit(out, (a, b), back)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _lift(b, a.data)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _lift(a, b.data), b
    return _lift(a), _lift(b)


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes("maximum", a, b)
    mask = a.data >= b.data
    return _emit(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (unbroadcast(g * mask, a.shape), unbroadcast(g * ~mask, b.shape)))


# -- elementwise unary -------------------------------------------------------

def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise TypeError("power only supports constant exponents")
    p = float(p)
    ad = a.data
    out = ad ** p
    return _emit(out, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    out = np.tanh(x * 0.5)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.logaddexp(0.0, ad).astype(ad.dtype, copy=False)
    return _emit(out, (a,), lambda g: (g * _sigmoid(ad),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid(ad)

    def back(g):
        d = 1.0 - s
        d *= ad
        d += 1.0
        d *= s
        d *= g
        return (d,)
    return _emit(ad * s, (a,), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,))


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _emit(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions (64-bit accumulation) ---------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)
    return _emit(out, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)
    return _emit(out, (a,), back)


def cumsum(a: Tensor, axis: int = -1, exclusive: bool = False) -> Tensor:
    ad = a.data
    axis = axis % ad.ndim
    out = np.cumsum(ad, axis=axis, dtype=np.float64).astype(ad.dtype)
    if exclusive:
        out = out - ad

    def back(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis, dtype=np.float64), axis).astype(g.dtype)
        if exclusive:
            rev = rev - g
        return (rev,)
    return _emit(out, (a,), back)


# -- linear algebra and shape ops -------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def back(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb
    return _emit(ad @ bd, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return _emit(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    src = a.shape
    return _emit(out, (a,), lambda g: (unbroadcast(g, src),))


def index(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = a.data[idx]
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)
    return _emit(out, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError("concat", *(x.shape for x in tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError("stack", *(t.shape for t in tensors))
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _emit(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _emit(out, (a, b), lambda g: (unbroadcast(np.where(mask, g, 0), a.shape),
                                         unbroadcast(np.where(mask, 0, g), b.shape)))


def sum_all(tensors: Iterable[Tensor]) -> Tensor:
    total = None
    for t in tensors:
        total = t if total is None else total + t
    if total is None:
        raise ValueError("sum_all needs at least one tensor")
    return total
