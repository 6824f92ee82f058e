"""Minimal float64 tensor library with tape-based reverse-mode differentiation."""

from . import ops
from .gradcheck import grad_check, numerical_gradient
from .ops import RunningStats
from .tensor import Gradients, Tape, Tensor, as_tensor, inject_fault

__all__ = [
    "Gradients",
    "RunningStats",
    "Tape",
    "Tensor",
    "as_tensor",
    "grad_check",
    "inject_fault",
    "numerical_gradient",
    "ops",
]
