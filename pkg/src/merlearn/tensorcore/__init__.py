"""Reverse-mode autodiff over dense float64 tensors."""

from merlearn.tensorcore import ops
from merlearn.tensorcore.nn import (
    accuracy,
    conv2d,
    linear,
    l2_distance,
    lstm_cell,
    mse,
    pairwise_distances,
    softmax_cross_entropy,
)
from merlearn.tensorcore.params import (
    AdamState,
    ParamSet,
    adam_step,
    backward,
    finite_difference_check,
    sgd_step,
)
from merlearn.tensorcore.tensor import Tensor, as_tensor, grad, no_grad, recording

__all__ = [
    "AdamState",
    "ParamSet",
    "Tensor",
    "accuracy",
    "adam_step",
    "as_tensor",
    "backward",
    "conv2d",
    "finite_difference_check",
    "grad",
    "l2_distance",
    "linear",
    "lstm_cell",
    "mse",
    "no_grad",
    "ops",
    "pairwise_distances",
    "recording",
    "sgd_step",
    "softmax_cross_entropy",
]
