"""Minimal float32 tensor engine: the ops the enhancement network needs, with gradients."""

from .core import DTYPE, Tensor, as_tensor, precision, zero_grads
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    BCE_EPS,
    BatchNormParams,
    Conv2dParams,
    add,
    add_scalars,
    batchnorm,
    batchnorm_backward,
    batchnorm_forward,
    bce_backward,
    bce_forward,
    bce_loss,
    concat_channels,
    concat_channels_backward,
    concat_channels_forward,
    conv2d,
    conv2d_backward,
    conv2d_forward,
    conv_output_size,
    relu,
    relu_backward,
    relu_forward,
    sigmoid,
    sigmoid_backward,
    sigmoid_forward,
    upsample_nearest,
    upsample_nearest_backward,
    upsample_nearest_forward,
)
from .optim import AdamState, adam_step

__all__ = [name for name in dir() if not name.startswith("_")]
