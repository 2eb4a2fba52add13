"""Minimal tensor type with tape-based reverse-mode differentiation."""

from .gradcheck import GradCheckReport, grad_check, rel_err
from .ops import (
    add, as_tensor, bilinear_resize, bilinear_warp, charbonnier, concat, conv2d, getitem,
    layer_norm, leaky_relu, matmul, mean, mul, neg, pointwise, relu, reshape, resize_matrix,
    scale, sigmoid, stack, sub, sum_, swapaxes, take_rows, transpose,
)
from .tensor import (
    ContractError, DimensionError, NonFiniteError, Tape, Tensor, active_tape, backward, no_grad,
)

__all__ = [
    "Tensor", "Tape", "backward", "no_grad", "active_tape", "grad_check", "GradCheckReport",
    "rel_err", "DimensionError", "ContractError", "NonFiniteError", "add", "sub", "mul", "scale",
    "neg", "relu", "leaky_relu", "sigmoid", "pointwise", "sum_", "mean", "reshape", "transpose",
    "swapaxes", "concat", "stack", "getitem", "take_rows", "matmul", "conv2d", "layer_norm",
    "bilinear_warp", "bilinear_resize", "resize_matrix", "charbonnier", "as_tensor",
]
