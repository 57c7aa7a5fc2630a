"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient.  Outside a tape the same functions run
as plain numpy and build no graph, which is what evaluation code relies on.

Broadcasting is deliberately narrow: binary operations accept equal shapes or
a 0-d operand.  The one exception is :func:`linear`, which adds a bias row to
every row of a matrix.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "square",
    "clip",
    "matmul",
    "linear",
    "tsum",
    "tmean",
    "log_sum_exp",
    "log_softmax",
    "softmax",
    "concat",
    "stack",
    "take",
    "tile_rows",
    "reshape",
    "elementwise",
]

_TAPE_STACK: list["Tape"] = []
_TAPE_IDS = itertools.count(1)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Nodes are appended in creation order, so the list is already topologically
    sorted and a reverse sweep visits every node exactly once.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = tsum(square(x))
    >>> tape.backward(y)
    >>> x.grad.tolist()
    [2.0, 4.0, 6.0]
    """

    def __init__(self) -> None:
        self.id = next(_TAPE_IDS)
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], fn: BackwardFn) -> None:
        out.tape_id = self.id
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append((out, inputs, fn))

    def backward(self, root: "Tensor") -> None:
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape_id != self.id:
            raise ContractError("root tensor was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.nodes[: root._index + 1]):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                if t.tape_id != self.id:
                    leaves[key] = t
        for key, t in leaves.items():
            g = np.array(grads[key], dtype=np.float64).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A float64 array that can take part in a differentiation tape."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id: int | None = None
        self._tape: Tape | None = None
        self._index = -1

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(data, dtype=np.float64)
        t.grad = None
        t.requires_grad = False
        t.name = None
        t.tape_id = None
        t._tape = None
        t._index = -1
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

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from ``root``.

    Repeated calls on the same tape accumulate into existing gradients.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if root._tape is None:
        raise ContractError("root tensor is not on a differentiation tape")
    root._tape.backward(root)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, fn)
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return g if g.shape == shape else np.asarray(np.sum(g)).reshape(shape)


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


# -- elementwise unary --------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def expm1(a) -> Tensor:
    """``exp(a) - 1`` without cancellation near zero."""
    a = as_tensor(a)
    return _result(np.expm1(a.data), (a,), lambda g: (g * np.exp(a.data),))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` with the bias added to every row."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"cannot multiply shapes {x.shape} and {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match {weight.shape}")
    return _result(x.data @ weight.data + bias.data, (x, weight, bias),
                   lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)))


# -- reductions ---------------------------------------------------------------

def _expand(g: np.ndarray, shape: tuple[int, ...], axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    return _result(np.sum(a.data, axis=axis), (a,), lambda g: (_expand(g, a.shape, axis),))


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    return _result(np.mean(a.data, axis=axis), (a,),
                   lambda g: (_expand(g, a.shape, axis) / n,))


def log_sum_exp(a, axis: int = -1) -> Tensor:
    """Max-shifted ``log(sum(exp(a)))`` along ``axis``; a 1-d input gives a scalar."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("log_sum_exp needs at least one element along the axis")
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(total), axis=axis)
    soft = shifted / total
    return _result(out, (a,), lambda g: (soft * np.expand_dims(g, axis),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("log_softmax needs at least one element along the axis")
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _result(out, (a,),
                   lambda g: (g - soft * np.sum(g, axis=axis, keepdims=True),))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


# -- structure ----------------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise DimensionError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts or any(t.shape != ts[0].shape for t in ts):
        raise DimensionError("stack needs a non-empty list of equal shapes")
    out = np.stack([t.data for t in ts], axis=axis)
    return _result(out, ts,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def take(a, index) -> Tensor:
    """Numpy-style indexing with a gradient that scatters back."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise DimensionError(str(exc)) from exc
    basic = _is_basic(index)

    def fn(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=np.float64), (a,), fn)


def tile_rows(a, reps: int) -> Tensor:
    """Stack ``reps`` copies of ``a`` along a new leading block: (n, ...) -> (reps*n, ...)."""
    a = as_tensor(a)
    if a.ndim == 0 or reps < 1:
        raise DimensionError("tile_rows needs an array and reps >= 1")
    out = np.tile(a.data, (reps,) + (1,) * (a.ndim - 1))
    return _result(out, (a,), lambda g: (g.reshape((reps,) + a.shape).sum(axis=0),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "expm1": expm1,
    "log": log,
    "relu": relu,
    "sigmoid": sigmoid,
    "square": square,
    "negate": neg,
    "scalar-scale": scale,
}


def elementwise(tag: str, *inputs) -> Tensor:
    """Dispatch an elementwise primitive by name (``"relu"``, ``"add"``, ...)."""
    try:
        fn = _ELEMENTWISE[tag]
    except KeyError:
        raise ContractError(f"unknown elementwise op {tag!r}") from None
    return fn(*inputs)
