"""
Image corruptions used for robustness evaluation.
Only the image changes; mask and scribble are passed through untouched.
"""

import logging
from typing import Optional

import numpy as np
from scipy import ndimage

from .synthetic import Sample

logger = logging.getLogger(__name__)

CORRUPTION_KINDS = ("blur", "specular", "brightness-shift")
SEVERITIES = (1, 2, 3)

_BLUR_SIGMA = {1: 0.8, 2: 1.6, 3: 2.8}
_SPECULAR_RADIUS = {1: 0.06, 2: 0.10, 3: 0.15}
_BRIGHTNESS = {1: (1.10, 0.05), 2: (1.25, 0.12), 3: (1.45, 0.22)}


def _blur(image: np.ndarray, severity: int, rng: np.random.Generator) -> np.ndarray:
    # separable gaussian over the spatial axes only
    return ndimage.gaussian_filter(image, sigma=(0, _BLUR_SIGMA[severity], _BLUR_SIGMA[severity]), mode="reflect")


def _specular(image: np.ndarray, severity: int, rng: np.random.Generator) -> np.ndarray:
    _, h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = image.astype(np.float64)
    for _ in range(severity):
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        ry = _SPECULAR_RADIUS[severity] * h * rng.uniform(0.7, 1.3)
        rx = _SPECULAR_RADIUS[severity] * w * rng.uniform(0.7, 1.3)
        highlight = np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))
        out = out + 1.5 * highlight[None]
    return np.clip(out, 0.0, 1.0)


def _brightness_shift(image: np.ndarray, severity: int, rng: np.random.Generator) -> np.ndarray:
    scale, shift = _BRIGHTNESS[severity]
    if rng.random() < 0.5:
        scale, shift = 1.0 / scale, -shift
    return np.clip(image.astype(np.float64) * scale + shift, 0.0, 1.0)


_TRANSFORMS = {
    "blur": _blur,
    "specular": _specular,
    "brightness-shift": _brightness_shift,
}


def corrupt(sample: Sample, kind: str, severity: int, rng: Optional[np.random.Generator] = None) -> Sample:
    if kind not in _TRANSFORMS:
        raise ValueError(f"Unknown corruption kind: {kind} (expected one of {CORRUPTION_KINDS})")
    if severity not in SEVERITIES:
        raise ValueError(f"Corruption severity must be 1, 2 or 3, got {severity}")
    rng = rng if rng is not None else np.random.default_rng(0)
    image = _TRANSFORMS[kind](sample.image, severity, rng)
    return sample.replace(image=image.astype(np.float32))


def parse_corruption(tag: str):
    """'blur2' or 'blur:2' -> ('blur', 2)"""
    tag = tag.strip()
    if ":" in tag:
        kind, _, level = tag.partition(":")
    else:
        kind, level = tag.rstrip("0123456789"), tag[len(tag.rstrip("0123456789")):]
    try:
        severity = int(level)
    except ValueError:
        raise ValueError(f"Corruption '{tag}' has no severity; use kind:severity, e.g. blur:2")
    if kind not in _TRANSFORMS or severity not in SEVERITIES:
        raise ValueError(f"Invalid corruption '{tag}'")
    return kind, severity


def psnr(reference: np.ndarray, distorted: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(reference, np.float64) - np.asarray(distorted, np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))
