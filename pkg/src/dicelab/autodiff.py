"""Dense float64 tensors with tape-recorded reverse-mode gradients.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient, so inference code pays nothing for the machinery::

    with Tape() as tape:
        loss = (w * w).sum()
    (gw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

K = _kernels.active


class NonFiniteError(FloatingPointError):
    """A recorded intermediate or a loss contains NaN/inf."""


_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records the operations executed inside its ``with`` block."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Reverse sweep from a scalar ``loss``; zeros for non-participating params."""
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("loss is not finite")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            if not np.isfinite(out.data).all():
                raise NonFiniteError(f"non-finite intermediate of shape {out.shape}")
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def backward(loss: Tensor, params: Sequence[Tensor], tape: Tape | None = None) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params`` using the innermost active tape."""
    tape = tape or (_TAPES[-1] if _TAPES else None)
    if tape is None:
        raise RuntimeError("backward() needs the tape the loss was recorded on")
    return tape.gradient(loss, params)


def _emit(data, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1]._nodes.append((out, parents, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _emit(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = K.sigmoid(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _emit(K.softplus(a.data), (a,), lambda g: (g * K.sigmoid(a.data),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    return _emit(
        K.leaky_relu(a.data, slope),
        (a,),
        lambda g: (K.leaky_relu_grad(a.data, g, slope),),
    )


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


# -- reductions and shape ------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data.T, (a,), lambda g: (g.T,))


def index(a, key) -> Tensor:
    """Basic or fancy indexing; repeated fancy indices accumulate gradient."""
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _emit(a.data[key], (a,), vjp)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    return _emit(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


# -- linear algebra and softmax --------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dense(x, w, b) -> Tensor:
    """``x @ w + b`` fused into one node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"dense: input {x.shape} does not match weights {w.shape}")
    need_x = x.requires_grad
    return _emit(
        x.data @ w.data + b.data,
        (x, w, b),
        lambda g: (g @ w.data.T if need_x else None, x.data.T @ g, g.sum(axis=0)),
    )


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor."""
    a = as_tensor(a)
    out = K.log_softmax(a.data)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _emit(out, (a,), vjp)


def place_slots(za, zb, slot_a: np.ndarray, slot_b: np.ndarray, n_slots: int) -> Tensor:
    """Scatter two ``(n, d)`` blocks into a zero ``(n, n_slots*d)`` member-slot layout."""
    za, zb = as_tensor(za), as_tensor(zb)
    n, d = za.shape
    rows = np.arange(n)[:, None]
    cols_a = np.asarray(slot_a)[:, None] * d + np.arange(d)
    cols_b = np.asarray(slot_b)[:, None] * d + np.arange(d)
    if np.any(np.asarray(slot_a) == np.asarray(slot_b)):
        raise ValueError("a pair must occupy two distinct member slots")
    out = np.zeros((n, n_slots * d))
    out[rows, cols_a] = za.data
    out[rows, cols_b] = zb.data
    return _emit(out, (za, zb), lambda g: (g[rows, cols_a], g[rows, cols_b]))
