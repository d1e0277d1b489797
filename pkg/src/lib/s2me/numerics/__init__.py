"""
Differentiable dense-array computation for the two segmentation branches.
"""

from .gradcheck import CoordinateCheck, GradCheckReport, grad_check
from .ops import (
    affine_channels,
    concat,
    conv2d,
    flip,
    log_softmax_channels,
    max_pool2d,
    normalize,
    relu,
    softmax_channels,
    take_channels,
    upsample_bilinear2x,
    upsample_nearest2x,
)
from .spectral import ComplexSpectrum, irfft2, rfft2
from .tensor import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    default_dtype,
    div,
    exp,
    grad_enabled,
    log,
    mul,
    no_grad,
    precision,
    reshape,
    sub,
    tensor_mean,
    tensor_sum,
)

__all__ = [
    "ComplexSpectrum", "CoordinateCheck", "GradCheckReport", "Parameter", "Tensor",
    "add", "affine_channels", "as_tensor", "concat", "conv2d", "default_dtype", "div", "exp",
    "flip", "grad_check", "grad_enabled", "irfft2", "log", "log_softmax_channels",
    "max_pool2d", "mul", "no_grad", "normalize", "precision", "relu", "reshape", "rfft2",
    "softmax_channels", "sub", "take_channels", "tensor_mean", "tensor_sum",
    "upsample_bilinear2x", "upsample_nearest2x",
]
