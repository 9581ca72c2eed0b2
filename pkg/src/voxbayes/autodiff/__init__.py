"""Reverse-mode automatic differentiation over float64 tensors."""

from . import ops
from .core import (Node, Primitive, apply, as_array, backward, const, forward, leaf, lift,
                   reset, topo_order, value_and_grad)
from .gradcheck import finite_difference_gradient, relative_error

__all__ = [
    "Node", "Primitive", "apply", "as_array", "backward", "const", "forward", "leaf", "lift",
    "ops", "reset", "topo_order", "value_and_grad", "finite_difference_gradient",
    "relative_error",
]
