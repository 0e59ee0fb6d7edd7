"""Minimal dense tensor engine with reverse-mode autodiff."""
from . import kernels, ops
from .gradcheck import check_gradients, numerical_grad, relative_error
from .nn import LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .ops import (
    add, clip, concat, conv1d, conv1d_transpose, depthwise_conv1d, div, exp, gelu,
    getitem, layer_norm, linear, log, matmul, max_pool1d, mean, mul, pad, power,
    relu, reshape, scaled_dot_product_attention, sigmoid, softmax, sqrt, stack, sub,
    swapaxes, transpose,
)
from .ops import sum as reduce_sum
from .tensor import (
    ComputationRecord, ContractError, NonFiniteError, ShapeError, Tensor, as_tensor,
    backward, is_grad_enabled, no_grad, set_finite_checks,
)

__all__ = [
    "kernels", "ops", "check_gradients", "numerical_grad", "relative_error",
    "LayerNorm", "Linear", "Module", "MultiHeadAttention", "Parameter",
    "add", "clip", "concat", "conv1d", "conv1d_transpose", "depthwise_conv1d", "div",
    "exp", "gelu", "getitem", "layer_norm", "linear", "log", "matmul", "max_pool1d",
    "mean", "mul", "pad", "power", "relu", "reshape", "scaled_dot_product_attention",
    "sigmoid", "softmax", "sqrt", "stack", "sub", "swapaxes", "transpose", "reduce_sum",
    "ComputationRecord", "ContractError", "NonFiniteError", "ShapeError", "Tensor",
    "as_tensor", "backward", "is_grad_enabled", "no_grad", "set_finite_checks",
]
