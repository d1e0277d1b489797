"""
Differentiable operators used by the segmentation branches and losses.

Layout convention is N x C x H x W for every feature map. Convolution is
cross-correlation (no kernel flip).
"""

from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_result


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects an N x C x H x W tensor, got shape {x.shape}")


def conv2d(
    x,
    weight,
    bias=None,
    padding: int = 0,
    stride: int = 1,
) -> Tensor:
    """2-D cross-correlation of `x` (N x Cin x H x W) with `weight` (Cout x Cin x k x k)"""
    x, weight = as_tensor(x), as_tensor(weight)
    _require_4d(x, "conv2d")
    if weight.ndim != 4 or weight.shape[1] != x.shape[1] or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight shape {weight.shape} does not match input shape {x.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv2d needs an odd kernel size, got weight shape {weight.shape}")
    if padding < 0 or stride < 1:
        raise ShapeError(f"conv2d needs padding >= 0 and stride >= 1, got {padding} and {stride}")

    n, c, h, w = x.shape
    out_c = weight.shape[0]
    span_h, span_w = h + 2 * padding - k, w + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d output size is not a positive integer for input shape {x.shape}, "
            f"weight shape {weight.shape}, padding {padding}, stride {stride}"
        )
    out_h, out_w = span_h // stride + 1, span_w // stride + 1

    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (out_c,):
            raise ShapeError(f"conv2d bias shape {bias.shape} does not match weight shape {weight.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * k * k)
    kernel = weight.data.reshape(out_c, -1)

    out = (cols @ kernel.T).reshape(n, out_h, out_w, out_c).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        flat = g.transpose(0, 2, 3, 1).reshape(-1, out_c)
        d_weight = (flat.T @ cols).reshape(weight.shape)
        d_cols = (flat @ kernel).reshape(n, out_h, out_w, c, k, k)
        d_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                d_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                    d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        d_x = d_padded[:, :, padding:padding + h, padding:padding + w]
        d_bias = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return d_x, d_weight, d_bias

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(np.ascontiguousarray(out), parents, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def max_pool2d(x) -> Tensor:
    """2 x 2 max pooling with stride 2; ties route the gradient to the first maximum"""
    x = as_tensor(x)
    _require_4d(x, "max_pool2d")
    n, c, h, w = x.shape
    for label, extent in (("height", h), ("width", w)):
        if extent % 2:
            raise ShapeError(f"max_pool2d needs an even {label}, got {extent} in shape {x.shape}")

    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    winner = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, winner, axis=-1)[..., 0]

    def backward(g):
        d_blocks = np.zeros_like(blocks)
        np.put_along_axis(d_blocks, winner, g[..., None], axis=-1)
        return (d_blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_result(out, (x,), backward)


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    _require_4d(x, "upsample_nearest2x")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward)


@lru_cache(maxsize=64)
def _bilinear_matrix(size: int) -> np.ndarray:
    """(2*size) x size interpolation matrix, half-pixel centres, edge clamped"""
    matrix = np.zeros((2 * size, size))
    for i in range(2 * size):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), size - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, size - 1)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix


def upsample_bilinear2x(x) -> Tensor:
    x = as_tensor(x)
    _require_4d(x, "upsample_bilinear2x")
    _, _, h, w = x.shape
    rows = _bilinear_matrix(h).astype(x.dtype)
    cols = _bilinear_matrix(w).astype(x.dtype)
    out = np.einsum('ih,nchw,jw->ncij', rows, x.data, cols, optimize=True)

    def backward(g):
        return (np.einsum('ih,ncij,jw->nchw', rows, g, cols, optimize=True),)

    return make_result(out, (x,), backward)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, reference)) if i != axis % len(reference)
        ):
            raise ShapeError(f"concat along axis {axis} got incompatible shapes {reference} and {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tuple(tensors), backward)


def take_channels(x, start: int, stop: int) -> Tensor:
    """Channel slice x[:, start:stop]"""
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel range [{start}, {stop}) is outside shape {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_result(x.data[:, start:stop], (x,), backward)


def normalize(x, axes: Tuple[int, ...], eps: float = 1e-5):
    """Zero-mean unit-variance normalisation over `axes`.

    Returns the normalised tensor plus the batch mean and (biased) variance,
    which callers use for running statistics.
    """
    x = as_tensor(x)
    mean = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std
    count = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        g_sum = g.sum(axis=axes, keepdims=True)
        gx_sum = (g * x_hat).sum(axis=axes, keepdims=True)
        return (inv_std / count * (count * g - g_sum - x_hat * gx_sum),)

    return make_result(x_hat, (x,), backward), mean, var


def softmax_channels(logits) -> Tensor:
    """Softmax over axis 1, max-shifted for stability"""
    logits = as_tensor(logits)
    _require_4d(logits, "softmax_channels")
    if logits.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs at least 2 channels, got shape {logits.shape}")
    shifted = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    probs = shifted / shifted.sum(axis=1, keepdims=True)

    def backward(g):
        return (probs * (g - (g * probs).sum(axis=1, keepdims=True)),)

    return make_result(probs, (logits,), backward)


def log_softmax_channels(logits) -> Tensor:
    logits = as_tensor(logits)
    _require_4d(logits, "log_softmax_channels")
    if logits.shape[1] < 2:
        raise ShapeError(f"log_softmax_channels needs at least 2 channels, got shape {logits.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return make_result(out, (logits,), backward)


def flip(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return make_result(np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis).copy(),))


def affine_channels(x, weight: Optional[Tensor], bias: Optional[Tensor]) -> Tensor:
    """Per-channel scale and shift with C-shaped parameters"""
    out = as_tensor(x)
    if weight is not None:
        out = out * weight.reshape(1, -1, 1, 1)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out
