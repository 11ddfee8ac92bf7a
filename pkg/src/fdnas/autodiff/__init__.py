"""Minimal reverse-mode autodiff over float64 numpy arrays."""

from .gradcheck import finite_diff_grad, relative_error
from .ops import (
    PRIMITIVES,
    ShapeError,
    add,
    apply_primitive,
    batch_norm,
    conv2d,
    cross_entropy,
    depthwise_conv2d,
    flatten,
    global_avg_pool,
    linear,
    relu6,
    scale,
    tsum,
)
from .optim import OptimizerState, adam_step, cosine_lr, sgd_momentum_step
from .tensor import Parameter, Tape, Tensor, active_tape, backward, no_grad

__all__ = [
    "PRIMITIVES",
    "OptimizerState",
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "add",
    "apply_primitive",
    "backward",
    "batch_norm",
    "conv2d",
    "cosine_lr",
    "cross_entropy",
    "depthwise_conv2d",
    "finite_diff_grad",
    "flatten",
    "global_avg_pool",
    "linear",
    "no_grad",
    "relative_error",
    "relu6",
    "scale",
    "sgd_momentum_step",
    "tsum",
]
