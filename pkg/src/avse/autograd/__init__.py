"""Minimal reverse-mode differentiation over numpy arrays."""
from .check import grad_check
from .ops import (
    abs, add, concat, conv2d, conv_transpose2d, div, getitem, l2_norm, matmul,
    max_with_const, mean, min_with_const, mul, neg, pool_freq, relu, reshape,
    segment, sigmoid, split, sqrt, square, sub, sum, upsample, upsample_freq,
    upsample_time,
)
from .tensor import Tensor, as_tensor, backward

__all__ = [
    "Tensor", "as_tensor", "backward", "grad_check",
    "abs", "add", "concat", "conv2d", "conv_transpose2d", "div", "getitem",
    "l2_norm", "matmul", "max_with_const", "mean", "min_with_const", "mul",
    "neg", "pool_freq", "relu", "reshape", "segment", "sigmoid", "split",
    "sqrt", "square", "sub", "sum", "upsample", "upsample_freq", "upsample_time",
]
