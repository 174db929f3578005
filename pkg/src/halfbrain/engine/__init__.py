"""Small deterministic tensor/autodiff engine used by every model in the package."""

from . import checkpoint, functional
from .functional import (
    LayerSpec,
    avgpool2d,
    batchnorm2d,
    conv2d,
    conv2d_backward,
    conv2d_forward,
    fully_connected,
    leaky_relu,
    mse_loss,
    softmax,
    softmax_cross_entropy,
    upsample2d,
)
from .layers import BatchNorm2d, Conv2d, Linear, Module, Parameter
from .optim import Adam, AdamState, cosine_lr
from .tensor import Tensor, concat, flip, no_grad, sigmoid

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "Conv2d", "LayerSpec", "Linear", "Module",
    "Parameter", "Tensor", "avgpool2d", "batchnorm2d", "checkpoint", "concat", "conv2d",
    "conv2d_backward", "conv2d_forward", "cosine_lr", "flip", "fully_connected",
    "functional", "leaky_relu", "mse_loss", "no_grad", "sigmoid", "softmax",
    "softmax_cross_entropy", "upsample2d",
]
