"""Minimal dense-tensor engine with reverse-mode autodiff and ADAM."""
from . import backend
from .gradcheck import check_gradients, numerical_grad, rel_error
from .optim import Adam, AdamState, adam_step
from .tensor import (
    ShapeError, Tensor, add, affine, channels, concat, conv2d, flop_counter,
    gate_update, is_grad_enabled, mean, mse, mul, no_grad, pool, relu, reshape,
    scale, sigmoid, sub, sum, tanh, tensor, zeros,
)

__all__ = [
    "Adam", "AdamState", "ShapeError", "Tensor", "adam_step", "add", "affine",
    "backend", "channels", "check_gradients", "concat", "conv2d", "flop_counter",
    "gate_update", "is_grad_enabled", "mean", "mse", "mul", "no_grad",
    "numerical_grad", "pool", "rel_error", "relu", "reshape", "scale",
    "sigmoid", "sub", "sum", "tanh", "tensor", "zeros",
]
