"""Tensor value type, operation tape and reverse-mode gradient replay."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """The tape cannot be replayed (cycle, missing adjoint, bad loss)."""


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional real array with an optional gradient flag.

    Row-major, ``[batch, channel, height, width]`` by convention. The
    data array is treated as immutable; optimizers rebind ``data``
    between steps instead of writing into it.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # Operator sugar, resolved lazily to avoid an import cycle.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Optional[Vjp]


@dataclass
class Tape:
    """Ordered record of executed operations.

    Used as a context manager; every operation whose inputs carry the
    gradient flag is appended while the tape is active.
    """

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            raise TapeError("tape stack corrupted")

    def __len__(self) -> int:
        return len(self.records)

    def leaves(self) -> list[Tensor]:
        produced = {id(r.output) for r in self.records}
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def make_result(data: np.ndarray, inputs: Sequence[Tensor], vjp: Optional[Vjp], op: str) -> Tensor:
    """Wrap an op's output and record it on the active tape.

    ``vjp`` maps the output cotangent to one cotangent per input (or
    ``None`` for inputs that receive nothing). Passing ``vjp=None`` for a
    grad-tracked op makes replay fail with a missing-adjoint error.
    """
    check_finite(data, op)
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    tape = active_tape()
    if requires_grad and tape is not None:
        tape.records.append(Record(op, tuple(inputs), out, vjp))
    return out


def detach(x: Tensor) -> Tensor:
    """Value-identical tensor that stops gradient flow."""
    return Tensor(x.data, requires_grad=False)


def _validate(tape: Tape) -> None:
    position: dict[int, int] = {}
    for i, rec in enumerate(tape.records):
        if id(rec.output) in position:
            raise TapeError(f"cyclic tape: output of {rec.op!r} recorded twice")
        position[id(rec.output)] = i
    for i, rec in enumerate(tape.records):
        for t in rec.inputs:
            j = position.get(id(t))
            if j is not None and j >= i:
                raise TapeError(f"cyclic tape: {rec.op!r} consumes a value produced at or after it")


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` in reverse and return d(loss)/d(leaf).

    The map covers ``wrt`` when given, otherwise every grad-flagged leaf
    on the tape. Leaves the loss does not depend on get zeros. The tape
    is not modified, so replaying it again gives identical results.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    _validate(tape)
    targets = list(wrt) if wrt is not None else tape.leaves()

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    produced = {id(r.output) for r in tape.records}

    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        if rec.vjp is None:
            raise TapeError(f"missing adjoint for operation {rec.op!r}")
        in_grads = rec.vjp(g)
        if len(in_grads) != len(rec.inputs):
            raise TapeError(f"adjoint of {rec.op!r} returned {len(in_grads)} cotangents for {len(rec.inputs)} inputs")
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise TapeError(f"adjoint of {rec.op!r} returned shape {gi.shape}, expected {t.shape}")
            store = grads if id(t) in produced else leaf_grads
            prev = store.get(id(t))
            store[id(t)] = gi if prev is None else prev + gi

    if id(loss) not in produced and loss.requires_grad:
        leaf_grads[id(loss)] = np.ones_like(loss.data)

    return {t: leaf_grads.get(id(t), np.zeros_like(t.data)) for t in targets}
