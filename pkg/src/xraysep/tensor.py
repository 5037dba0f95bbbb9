"""Dense tensor with a recording tape for reverse-mode differentiation.

Every differentiable op in :mod:`xraysep.layers` records a node on the active
:class:`GradTape`. Nodes are appended in execution order, which is already a
topological order, so the backward pass is a single reversed sweep.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64

_local = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from finite inputs."""


class Tensor:
    """N-dimensional float array that can take part in gradient flow.

    ``data`` is a numpy array. Once a tensor has been recorded on a tape its
    data must not be mutated in place; optimizers rebind ``data`` instead.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(TRAIN_DTYPE if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar, all recorded on the active tape
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
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self):
        return total_sum(self)

    def mean(self):
        return mean(self)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Ordered record of differentiable ops executed inside its context.

    >>> with GradTape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, tuple(inputs), backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``."""
        if grad is None:
            if loss.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            _accumulate_onto(node.out, g)
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # leaves (parameters, inputs) never appear as a node output
        leaves = {}
        for node in self.nodes:
            for t in node.inputs:
                leaves[id(t)] = t
        if id(loss) not in {id(n.out) for n in self.nodes}:
            leaves[id(loss)] = loss
        for key, g in grads.items():
            t = leaves.get(key)
            if t is not None:
                _accumulate_onto(t, g)


def _accumulate_onto(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _tape_stack() -> list[GradTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")


_corrupted: dict[str, float] = {}


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.01):
    """Test hook: scale every input gradient produced by ``op`` by ``factor``."""
    _corrupted[op] = factor
    try:
        yield
    finally:
        del _corrupted[op]


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output and record it on the active tape if needed."""
    check_finite(data, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        if op in _corrupted:
            backward = _scaled(backward, _corrupted[op])
        tape.record(out, inputs, backward)
    return out


def _scaled(backward: Callable, factor: float) -> Callable:
    def wrapped(g):
        return tuple(None if gi is None else gi * factor for gi in backward(g))
    return wrapped


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    ref = a_t if a_t is not None else b_t
    if a_t is None:
        a_t = Tensor(np.asarray(a, dtype=ref.dtype))
    if b_t is None:
        b_t = Tensor(np.asarray(b, dtype=ref.dtype))
    return a_t, b_t


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward, "mul")


def total_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)

    def backward(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return make_result(out, (a,), backward, "mean")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return make_result(out, tensors, backward, "concat")


def split(t: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into equal parts, each a recorded slice."""
    n = t.shape[axis]
    if n % sections:
        raise ValueError(f"cannot split axis of length {n} into {sections} equal parts")
    step = n // sections
    parts = []
    for k in range(sections):
        idx = [slice(None)] * t.data.ndim
        idx[axis] = slice(k * step, (k + 1) * step)
        parts.append(take(t, tuple(idx)))
    return parts


def take(t: Tensor, idx) -> Tensor:
    out = np.array(t.data[idx])

    def backward(g):
        full = np.zeros_like(t.data)
        np.add.at(full, idx, g) if _is_fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return make_result(out, (t,), backward, "take")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)
