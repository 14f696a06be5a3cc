"""Minimal reverse-mode differentiation with pluggable ReLU backward rules."""

from .gradcheck import GradCheckResult, grad_check
from .ops import BatchNormState
from .rules import GUIDED, VANILLA, BackpropRule, relu_backward
from .tensor import DEFAULT_DTYPE, Tensor, as_tensor, backward, forward

__all__ = [
    "BackpropRule", "BatchNormState", "DEFAULT_DTYPE", "GUIDED", "GradCheckResult",
    "Tensor", "VANILLA", "as_tensor", "backward", "forward", "grad_check", "relu_backward",
]
