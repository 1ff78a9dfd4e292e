"""Dense float32 tensors and the reverse-mode tape.

Tensors hold row-major float32 data of rank <= 4. A tensor created with
``requires_grad=True`` owns a same-shape ``grad`` buffer that ``backward``
accumulates into; all other tensors have ``grad = None``. Values must stay
finite: any primitive that produces NaN/Inf raises immediately.

Recording is ambient: primitives executed inside a ``with Tape():`` block
are appended to that tape, and ``backward(tape, loss)`` replays the record
once in reverse execution order. Outside a tape block primitives run as
plain forward computations (used for inference and label construction).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

_FINITE_CHECK = True


def set_finite_check(enabled: bool) -> None:
    """Toggle the per-primitive NaN/Inf guard (default on)."""
    global _FINITE_CHECK
    _FINITE_CHECK = bool(enabled)


def finite_check_enabled() -> bool:
    return _FINITE_CHECK


class Tensor:
    """Float32 array of rank <= 4 with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim > 4:
            raise ValueError(f"tensors support rank <= 4, got rank {arr.ndim}")
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if self.requires_grad else None
        )

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        """Same storage, no grad tracking. Data is shared, not copied."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# Backward closures take the output gradient and return one gradient
# array (or None) per recorded input, in order.
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed primitives.

    Entering the context makes the tape active; nested tapes are allowed
    and the innermost one records. The record is append-only and is
    replayed in reverse exactly once per backward() call.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> None:
        self._records.append((out, tuple(inputs), backward_fn))

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted")
        return False


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def emit(result: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap a primitive result, guard finiteness, record on the active tape."""
    out = Tensor(result)
    if _FINITE_CHECK and not np.isfinite(out.data).all():
        raise ValueError("primitive produced non-finite values")
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every requires_grad leaf on the tape.

    Leaves not reachable from the loss keep their (zero-initialised) grad
    buffers untouched. Gradient arrays are combined without in-place
    mutation so closures may return shared views safely.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, backward_fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        holders.pop(id(out), None)
        if g is None:
            continue
        input_grads = backward_fn(g)
        for t, ig in zip(inputs, input_grads):
            if ig is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                holders[key] = t
    for key, t in holders.items():
        if t.requires_grad:
            t.grad += grads[key]
