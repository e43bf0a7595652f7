"""Tensor/autodiff core: ops, losses and the Adam optimizer."""

from .losses import bce_loss, dice_loss, l1_loss, mse_loss
from .ops import (
    activation,
    add,
    batchnorm3d,
    concat,
    conv3d,
    conv_transpose3d,
    instancenorm3d,
    leaky_relu,
    maxpool3d,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softplus,
    sub,
    tanh,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, as_tensor

__all__ = [
    "Adam", "AdamState", "Tensor", "activation", "adam_step", "add", "as_tensor", "batchnorm3d",
    "bce_loss", "concat", "conv3d", "conv_transpose3d", "dice_loss", "instancenorm3d", "l1_loss",
    "leaky_relu", "maxpool3d", "mean", "mse_loss", "mul", "relu", "reshape", "sigmoid", "softplus",
    "sub", "tanh",
]
