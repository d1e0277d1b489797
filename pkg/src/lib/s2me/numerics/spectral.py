"""
Real-input 2-D Fourier transforms over the last two axes.

Forward transform is unnormalised, the inverse carries 1/(H*W), so
irfft2(rfft2(x), W) == x. The half spectrum keeps W//2 + 1 columns.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_result


@dataclass(frozen=True)
class ComplexSpectrum:
    """Half spectrum split into real and imaginary tensors of identical shape"""
    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"spectrum parts differ in shape: {self.real.shape} vs {self.imag.shape}")

    @property
    def shape(self):
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def _hermitian_weights(width: int, half: int) -> np.ndarray:
    """How many full-spectrum columns each half-spectrum column stands for"""
    weights = np.full(half, 2.0)
    weights[0] = 1.0
    if width % 2 == 0:
        weights[-1] = 1.0
    return weights


def rfft2(x) -> ComplexSpectrum:
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 2 or x.shape[-1] < 2:
        raise ShapeError(f"rfft2 needs H, W >= 2, got shape {x.shape}")
    height, width = x.shape[-2:]
    spectrum = np.fft.rfft2(x.data, axes=(-2, -1))
    stacked = np.stack([spectrum.real, spectrum.imag])

    def backward(g):
        # adjoint of the half-spectrum DFT: zero-fill the missing columns, conjugate transform
        packed = g[0] + 1j * g[1]
        full = np.zeros(x.shape, dtype=np.complex128)
        full[..., :packed.shape[-1]] = packed
        return (np.fft.ifft2(full, axes=(-2, -1)).real * (height * width),)

    joint = make_result(stacked, (x,), backward)
    return _split(joint)


def irfft2(spectrum: ComplexSpectrum, out_width: int) -> Tensor:
    real, imag = spectrum.real, spectrum.imag
    half = real.shape[-1]
    if out_width < 2 or out_width // 2 + 1 != half:
        raise ShapeError(f"irfft2 width {out_width} is incompatible with half-spectrum shape {real.shape}")
    height = real.shape[-2]
    out = np.fft.irfft2(real.data + 1j * imag.data, s=(height, out_width), axes=(-2, -1))
    weights = _hermitian_weights(out_width, half)

    def backward(g):
        adjoint = np.fft.rfft2(g, axes=(-2, -1)) * weights / (height * out_width)
        return adjoint.real, adjoint.imag

    return make_result(out, (real, imag), backward)


def _split(joint: Tensor) -> ComplexSpectrum:
    def pick(index):
        def backward(g):
            full = np.zeros_like(joint.data)
            full[index] = g
            return (full,)

        return make_result(joint.data[index], (joint,), backward)

    return ComplexSpectrum(real=pick(0), imag=pick(1))
