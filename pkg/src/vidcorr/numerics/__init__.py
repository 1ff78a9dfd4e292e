"""Minimal float32 tensor arithmetic with reverse-mode differentiation."""

from .tensor import (
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    backward,
    emit,
    finite_check_enabled,
    set_finite_check,
)
from . import ops
from .ops import primitive_forward
from .optim import AdamState, adam_step, cosine_lr, init_adam
from . import tensorfile

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "as_tensor",
    "backward",
    "emit",
    "finite_check_enabled",
    "set_finite_check",
    "ops",
    "primitive_forward",
    "AdamState",
    "adam_step",
    "cosine_lr",
    "init_adam",
    "tensorfile",
]
