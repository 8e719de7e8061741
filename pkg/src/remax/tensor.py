"""Dense float64 tensors with a recorded reverse-mode gradient tape.

A :class:`Tape` records every operation whose inputs are attached to it.
Leaves are attached with :meth:`Tape.watch`; everything built from attached
tensors is recorded automatically, everything else is a plain immutable value.

    tape = Tape()
    w = tape.watch(Tensor(np.ones((3, 2))))
    loss = (x @ w).sigmoid().sum()
    grads = backward(tape, loss)
    grads[w.node_id]

Broadcasting is deliberately narrow: identical shapes, a scalar against
anything, a vector ``(n,)`` against a matrix ``(m, n)``, and a ``(m, 1)`` or
``(1, n)`` matrix against ``(m, n)``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
Vjp = Callable[[np.ndarray], Sequence[Union[np.ndarray, None]]]

_EPS_HALF = np.finfo(np.float64).epsneg  # 1 - epsneg is the largest double below 1
_TINY = np.finfo(np.float64).tiny


class ShapeError(ValueError):
    """Operand shapes are incompatible under the supported broadcast rules."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (foreign tape, non-scalar loss, ...)."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


class Tape:
    """Ordered record of operations; node ids are indices into the record."""

    def __init__(self) -> None:
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Vjp | None] = []
        self.shapes: list[tuple[int, ...]] = []

    def __len__(self) -> int:
        return len(self.ops)

    def watch(self, x: ArrayLike) -> Tensor:
        """Attach ``x`` as a leaf; returns a new tensor carrying the node id."""
        data = x.data if isinstance(x, Tensor) else _as_array(x)
        return self._record("leaf", (), data, None)

    def _record(self, op: str, parents: tuple[int, ...], data: np.ndarray, vjp: Vjp | None) -> Tensor:
        node = len(self.ops)
        self.ops.append(op)
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.shapes.append(data.shape)
        return Tensor._wrap(data, self, node)


class Tensor:
    """Immutable f64 array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100.0

    def __init__(self, data: ArrayLike) -> None:
        arr = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        _check_finite(arr, "Tensor()")
        arr.flags.writeable = False
        self.data = arr
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: Tape | None = None, node: int | None = None) -> Tensor:
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray) or arr.dtype != np.float64:
            arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.tape = tape
        t.node_id = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def attached(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.attached else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return reduce("mean", self, axis, keepdims)

    def max(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return reduce("max", self, axis, keepdims)

    def sigmoid(self) -> Tensor: return sigmoid(self)
    def exp(self) -> Tensor: return exp(self)
    def log(self) -> Tensor: return log(self)
    def relu(self) -> Tensor: return relu(self)
    def reshape(self, *shape) -> Tensor: return reshape(self, shape[0] if len(shape) == 1 else shape)


def _as_array(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    return _check_finite(arr, "constant")


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise TapeError("operands are attached to different tapes")
            tape = x.tape
    return tape


def _emit(op: str, inputs: tuple[Tensor, ...], data: np.ndarray, vjp: Vjp) -> Tensor:
    _check_finite(data, op)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor._wrap(data)
    parents = tuple(-1 if x.node_id is None else x.node_id for x in inputs)
    return tape._record(op, parents, data, vjp)


# broadcasting ---------------------------------------------------------------

def broadcast_shape(sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    """Result shape under the restricted rules, or raise :class:`ShapeError`."""
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    for small, big in ((sa, sb), (sb, sa)):
        if len(big) == 2:
            m, n = big
            if small in ((n,), (m, 1), (1, n)):
                return big
    raise ShapeError(f"cannot broadcast {sa} with {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1:
        return g.sum(axis=0)
    if shape[0] == 1 and shape[1] == 1:
        return g.sum(keepdims=True)
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    return g.sum(axis=1, keepdims=True)


# elementwise -----------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    _check_finite(out, "div")
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scale(a: ArrayLike, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    # keep the open interval even where 1/(1+e^-x) rounds to 1 in f64
    return np.clip(s, _TINY, 1.0 - _EPS_HALF)


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def log_sigmoid(a: ArrayLike) -> Tensor:
    """``log(sigmoid(x)) = min(x, 0) - log1p(exp(-|x|))``; never overflows."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    s_neg = _sigmoid_np(-x)
    return _emit("log_sigmoid", (a,), out, lambda g: (g * s_neg,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if (x <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _emit("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def silu(a: ArrayLike) -> Tensor:
    """``x * sigmoid(x)``, built from primitives."""
    a = as_tensor(a)
    return mul(a, sigmoid(a))


def elementwise(kind: str, a: ArrayLike, b: ArrayLike | float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, sigmoid, log, exp, relu, scale."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"sigmoid": sigmoid, "log": log, "exp": exp, "relu": relu}
    if kind in binary:
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        return binary[kind](a, b)
    if kind in unary:
        return unary[kind](a)
    if kind == "scale":
        if b is None:
            raise ShapeError("scale needs a constant")
        return scale(a, float(b.item() if isinstance(b, Tensor) else b))
    raise ValueError(f"unknown elementwise kind {kind!r}")


# linear algebra / shape --------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    with np.errstate(over="ignore", invalid="ignore"):
        out = ad @ bd
    return _emit("matmul", (a, b), out, lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.T), lambda g: (g.T,))


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if shape != () else ()
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _emit("reshape", (a,), out.copy(), lambda g: (g.reshape(src),))


def take(a: ArrayLike, indices: Sequence[int] | np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if axis >= a.ndim:
        raise ShapeError("take axis out of range")
    src = a.shape

    def vjp(g):
        out = np.zeros(src)
        if axis == 0:
            np.add.at(out, idx, g)
        else:
            np.add.at(out, (slice(None), idx), g)
        return (out,)

    return _emit("take", (a,), np.take(a.data, idx, axis=axis), vjp)


# reductions --------------------------------------------------------------------

def reduce(kind: str, x: ArrayLike, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None and not (0 <= axis < x.ndim):
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    if (x.size if axis is None else x.shape[axis]) == 0:
        raise ShapeError("reduction over an empty axis")
    src = x.shape

    def expand(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, src)

    if kind == "sum":
        out = x.data.sum(axis=axis, keepdims=keepdims)
        return _emit("sum", (x,), np.asarray(out), lambda g: (np.array(expand(g)),))
    if kind == "mean":
        n = x.size if axis is None else x.shape[axis]
        out = x.data.mean(axis=axis, keepdims=keepdims)
        return _emit("mean", (x,), np.asarray(out), lambda g: (np.array(expand(g)) / n,))
    if kind == "max":
        out = np.asarray(x.data.max(axis=axis, keepdims=keepdims))
        if axis is None:
            hot = np.zeros(x.size)
            hot[int(np.argmax(x.data))] = 1.0
            hot = hot.reshape(src)
        else:
            first = np.expand_dims(np.argmax(x.data, axis=axis), axis)
            hot = np.zeros(src)
            np.put_along_axis(hot, first, 1.0, axis=axis)
        return _emit("max", (x,), out, lambda g: (hot * expand(g),))
    raise ValueError(f"unknown reduction {kind!r}")


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", (x,), s,
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    s = np.exp(out)
    return _emit("log_softmax", (x,), out,
                 lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# stop-gradient and barrier replay ----------------------------------------------

class _BarrierLog(threading.local):
    mode: str | None = None
    values: list
    cursor: int = 0


_barriers = _BarrierLog()


@contextmanager
def _barrier_mode(mode: str, values: list) -> Iterator[list]:
    prev = (_barriers.mode, getattr(_barriers, "values", None), _barriers.cursor)
    _barriers.mode, _barriers.values, _barriers.cursor = mode, values, 0
    try:
        yield values
    finally:
        if mode == "replay" and _barriers.cursor != len(values):
            raise TapeError("stop_gradient call sequence changed between evaluations")
        _barriers.mode, _barriers.values, _barriers.cursor = prev


def stop_gradient(x: ArrayLike) -> Tensor:
    """Identity forward; the backward pass deposits nothing into ``x``.

    The result stays on the tape (so losses built only from it remain valid
    backward targets) but its vjp returns no gradient.
    """
    x = as_tensor(x)
    data = x.data
    if _barriers.mode == "record":
        _barriers.values.append(data)
    elif _barriers.mode == "replay":
        data = _barriers.values[_barriers.cursor]
        _barriers.cursor += 1
        if data.shape != x.shape:
            raise TapeError("stop_gradient replay shape mismatch")
    return _emit("stop_gradient", (x,), data.copy(), lambda g: (None,))


# backward ----------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns ``{node_id: gradient}`` for every leaf on ``tape`` (zeros for
    leaves the loss does not depend on). Accumulation follows tape order, so
    repeating the call yields bit-identical results.
    """
    if loss.tape is not tape or loss.node_id is None:
        raise TapeError("loss is not recorded on this tape")
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")

    grads: list[np.ndarray | None] = [None] * len(tape)
    grads[loss.node_id] = np.ones(loss.shape)
    for node in range(loss.node_id, -1, -1):
        g = grads[node]
        vjp = tape.vjps[node]
        if g is None or vjp is None:
            continue
        for parent, pg in zip(tape.parents[node], vjp(g)):
            if parent < 0 or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(tape.shapes[parent])
            grads[parent] = pg.copy() if grads[parent] is None else grads[parent] + pg

    out = {}
    for node, op in enumerate(tape.ops):
        if op == "leaf":
            g = grads[node]
            out[node] = np.zeros(tape.shapes[node]) if g is None else g
    return out


def gradient(f: Callable[[Tensor], Tensor], x: ArrayLike) -> tuple[float, np.ndarray]:
    """Value and gradient of scalar ``f`` at ``x``."""
    tape = Tape()
    xw = tape.watch(x)
    loss = f(xw)
    return loss.item(), backward(tape, loss)[xw.node_id]


def fd_check(f: Callable[[Tensor], Tensor], x: ArrayLike, eps: float = 1e-6,
             exempt_barriers: bool = True) -> float:
    """Max relative disagreement between ``backward`` and central differences.

    Per component the error is ``|ad - fd| / max(1e-8, |ad| + |fd|)``. With
    ``exempt_barriers`` the perturbed evaluations reuse the values that every
    ``stop_gradient`` produced at the base point, so the difference quotient
    treats barriers as constants exactly like the reverse pass does.
    """
    if not (1e-8 <= eps <= 1e-4):
        raise ValueError("eps must lie in [1e-8, 1e-4]")
    x0 = as_tensor(x).data.astype(np.float64)
    recorded: list = []
    if exempt_barriers:
        with _barrier_mode("record", recorded):
            _, ad = gradient(f, x0)
    else:
        _, ad = gradient(f, x0)

    def value(arr: np.ndarray) -> float:
        if exempt_barriers:
            with _barrier_mode("replay", recorded):
                v = f(Tensor._wrap(arr)).item()
        else:
            v = f(Tensor._wrap(arr)).item()
        if not np.isfinite(v):
            raise NonFiniteError("f returned a non-finite value")
        return v

    flat = x0.reshape(-1)
    fd = np.empty(flat.size)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += eps
        minus[i] -= eps
        step = plus[i] - minus[i]
        fd[i] = (value(plus.reshape(x0.shape)) - value(minus.reshape(x0.shape))) / step
    ad_flat = ad.reshape(-1)
    err = np.abs(ad_flat - fd) / np.maximum(1e-8, np.abs(ad_flat) + np.abs(fd))
    return float(err.max()) if err.size else 0.0
