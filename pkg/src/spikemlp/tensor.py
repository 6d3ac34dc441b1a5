"""Dense tensors with reverse-mode autodiff over a dynamically recorded tape.

Every differentiable operation appends a node to the active :class:`Tape`.
``backward`` walks that tape once, in exact reverse recording order, and then
marks it consumed; a fresh tape is opened lazily by the next recorded op.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    pass


@dataclass(eq=False)
class Node:
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise StaleTapeError("cannot record onto a tape that has already been backpropagated")
        self.nodes.append(node)


_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("spikemlp_tape", default=None)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("spikemlp_grad", default=True)


def active_tape() -> Tape:
    tape = _tape.get()
    if tape is None or tape.consumed:
        tape = Tape()
        _tape.set(tape)
    return tape


def new_tape() -> Tape:
    tape = Tape()
    _tape.set(tape)
    return tape


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """Row-major n-d array plus the bookkeeping needed to backpropagate through it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; everything routes through the recorded functions below.
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Parameter(Tensor):
    """Learnable leaf tensor; ``grad`` always exists and matches ``value``'s shape."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def record(out_data: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` and, when any input needs a gradient, put a node on the tape.

    ``backward`` maps the upstream gradient to one gradient (or None) per input.
    """
    out = Tensor(out_data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        tape = active_tape()
        out.requires_grad = True
        out._tape = tape
        tape.record(Node(tuple(inputs), out, backward))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(p) into ``p.grad`` for every Parameter reachable on the tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad and isinstance(loss, Parameter):
            loss.grad = loss.grad + np.ones_like(loss.data)
        return
    if tape.consumed:
        raise StaleTapeError("tape already consumed; re-run the forward pass before calling backward again")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"backward produced gradient {gi.shape} for tensor {t.shape}")
            if t._tape is None:
                # leaf: accumulate in place so repeated uses sum
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    tape.consumed = True
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# differentiable operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return record(A @ B, (a, b), bw)


def axis_apply(w: Tensor, x: Tensor, axis: int) -> Tensor:
    """Apply ``w`` [D_out x D_in] to every 1-d slice of ``x`` along ``axis``."""
    if w.ndim != 2:
        raise ShapeError(f"axis_apply weight must be 2-d, got {w.shape}")
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    if x.shape[axis] != w.shape[1]:
        raise ShapeError(f"axis_apply: weight {w.shape} cannot act on axis {axis} of {x.shape}")
    W, X = w.data, x.data
    out = np.moveaxis(np.tensordot(W, X, axes=([1], [axis])), 0, axis)

    def bw(g):
        gm = np.moveaxis(g, axis, 0)
        xm = np.moveaxis(X, axis, 0)
        other = tuple(range(1, X.ndim))
        gw = np.tensordot(gm, xm, axes=(other, other))
        gx = np.moveaxis(np.tensordot(W.T, gm, axes=([1], [0])), 0, axis)
        return gw, gx

    return record(np.ascontiguousarray(out), (w, x), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty list")
    ref = parts[0].shape
    axis = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat mismatch along non-concat axes: {ref} vs {p.shape}")
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def bw(g):
        return np.split(g, np.cumsum(sizes)[:-1], axis=axis)

    return record(out, tuple(parts), bw)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    for p in parts:
        if p.ndim != 4:
            raise ShapeError(f"concat_channels expects B x C x H x W parts, got {p.shape}")
    return concat(parts, axis=1)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return record(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data

    def bw(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return record(A * B, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {shape}") from None
    return record(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return record(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return record(out, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis), 1.0 / n)


def repeat_leading(a: Tensor, times: int) -> Tensor:
    """Stack ``times`` copies of ``a`` along axis 0 (gradients of the copies are summed)."""
    if times == 1:
        return a
    n = a.shape[0]
    out = np.concatenate([a.data] * times, axis=0)

    def bw(g):
        return (g.reshape((times, n) + a.shape[1:]).sum(axis=0),)

    return record(out, (a,), bw)
