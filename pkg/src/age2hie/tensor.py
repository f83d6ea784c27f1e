"""Dense tensors and reverse-mode automatic differentiation.

A Tensor wraps a C-contiguous numpy buffer (f32 by default, f64 in
verification mode) plus an optional gradient buffer.  Operations executed
while a ComputationRecord is active append (inputs, output, backward rule)
steps to it; backward() replays the steps in reverse order exactly once and
accumulates gradients into every participating tensor that requires them.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

SUPPORTED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending axis."""


class RecordError(RuntimeError):
    """Misuse of a ComputationRecord: reuse, dtype mixing, or a bad loss tensor."""


class Tensor:
    """N-dimensional value: shape + flat row-major buffer + optional grad."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # ascontiguousarray would promote 0-d to 1-d
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __float__(self) -> float:
        return self.item()

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, as_tensor(other))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, as_tensor(other))

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


class Step(NamedTuple):
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    name: str


class ComputationRecord:
    """Ordered log of executed operations for one forward pass.

    Inputs of every step precede it in the log (enforced by construction:
    steps are appended at execution time).  One backward() per record; the
    record is consumed afterwards and its steps are released.
    """

    __slots__ = ("steps", "consumed", "_dtype")

    def __init__(self):
        self.steps: list[Step] = []
        self.consumed = False
        self._dtype = None

    def register(self, inputs: tuple, output: Tensor, backward, name: str) -> None:
        if self.consumed:
            raise RecordError("cannot record onto a consumed ComputationRecord")
        for t in (*inputs, output):
            if self._dtype is None:
                self._dtype = t.dtype
            elif t.dtype != self._dtype:
                raise RecordError(
                    f"mixed dtypes in one record: {self._dtype} vs {t.dtype} (op {name})"
                )
        self.steps.append(Step(inputs, output, backward, name))

    def __len__(self) -> int:
        return len(self.steps)


_ACTIVE = threading.local()


def _record_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_record() -> Optional[ComputationRecord]:
    stack = _record_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def recording(record: Optional[ComputationRecord] = None):
    """Make `record` (or a fresh one) the active record for this thread."""
    rec = record if record is not None else ComputationRecord()
    stack = _record_stack()
    stack.append(rec)
    try:
        yield rec
    finally:
        stack.pop()


def apply_op(name: str, inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    """Wrap an op result, registering the backward rule when recording.

    `backward` maps the output gradient buffer to one gradient buffer (or
    None) per input, in input order.
    """
    rec = active_record()
    track = rec is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        rec.register(inputs, out, backward, name)
    return out


def backward(loss: Tensor, record: ComputationRecord) -> None:
    """Populate .grad of every requires_grad tensor reachable in the record.

    Tensors in the record that do not lie on a path to the loss receive a
    zero gradient.  The record is consumed: a second backward raises.
    """
    if record.consumed:
        raise RecordError("record already consumed; one backward per forward")
    if loss.shape != ():
        raise ShapeError(f"loss must be a scalar tensor, got shape {loss.shape}")
    if not record.steps or record.steps[-1].output is not loss:
        raise RecordError("loss is not the terminal output of this record")
    record.consumed = True

    for step in record.steps:
        for t in step.inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
        if step.output.grad is None:
            step.output.grad = np.zeros_like(step.output.data)

    loss.grad = np.ones((), dtype=loss.dtype)
    for step in reversed(record.steps):
        g_out = step.output.grad
        if not np.any(g_out):
            continue
        grads = step.backward(g_out)
        for t, g in zip(step.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise ShapeError(
                    f"backward of {step.name} produced grad shape {g.shape} "
                    f"for input shape {t.data.shape}"
                )
            t.grad += g
    record.steps = []


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (residual connections)."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def bwd(g):
        return g, g

    return apply_op("add", (a, b), a.data + b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def bwd(g):
        return g * b.data, g * a.data

    return apply_op("mul", (a, b), a.data * b.data, bwd)


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def bwd(g):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return apply_op("sum", (a,), a.data.sum(), bwd)
