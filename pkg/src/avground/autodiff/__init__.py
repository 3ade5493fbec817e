"""Minimal reverse-mode autodiff over numpy arrays."""
from .gradcheck import central_difference, finite_diff_check, relative_error, stable_difference
from .ops import (
    add,
    batchnorm1d,
    conv1d,
    conv2d,
    conv_output_length,
    dot,
    elementwise,
    linear,
    matmul,
    maxpool1d,
    mean,
    mul,
    relu,
    reshape,
    scale,
    shift,
    softmax_cross_entropy,
    spatial_mean_pool,
    sub,
    take,
    temporal_mean_pool,
    total,
    transpose,
)
from .optim import SGD, sgd_momentum_step
from .tensor import Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "SGD",
    "Tensor",
    "add",
    "as_tensor",
    "batchnorm1d",
    "central_difference",
    "conv1d",
    "conv2d",
    "conv_output_length",
    "dot",
    "elementwise",
    "finite_diff_check",
    "is_grad_enabled",
    "linear",
    "matmul",
    "maxpool1d",
    "mean",
    "mul",
    "no_grad",
    "relative_error",
    "relu",
    "reshape",
    "scale",
    "sgd_momentum_step",
    "shift",
    "softmax_cross_entropy",
    "stable_difference",
    "spatial_mean_pool",
    "sub",
    "take",
    "temporal_mean_pool",
    "total",
    "transpose",
]
