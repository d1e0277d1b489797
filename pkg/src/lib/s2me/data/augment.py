"""
Training-time augmentation: random border crop, resize, random flips.
The same spatial transform is applied to image, mask and scribble.
"""

from typing import Optional

import numpy as np
from skimage.transform import resize

from .synthetic import Sample


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a C x H x W image"""
    if image.shape[1:] == (size, size):
        return image.copy()
    out = resize(image, (image.shape[0], size, size), order=1, mode="edge", anti_aliasing=False, preserve_range=True)
    return out.astype(np.float32)


def resize_labels(labels: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of an H x W label map; values stay categorical"""
    if labels.shape == (size, size):
        return labels.copy()
    out = resize(labels, (size, size), order=0, mode="edge", anti_aliasing=False, preserve_range=True)
    return np.rint(out).astype(labels.dtype)


def flip_sample(sample: Sample, horizontal: bool = False, vertical: bool = False) -> Sample:
    image, mask, scribble = sample.image, sample.mask, sample.scribble
    if horizontal:
        image, mask, scribble = image[:, :, ::-1], mask[:, ::-1], scribble[:, ::-1]
    if vertical:
        image, mask, scribble = image[:, ::-1, :], mask[::-1, :], scribble[::-1, :]
    return sample.replace(
        image=np.ascontiguousarray(image),
        mask=np.ascontiguousarray(mask),
        scribble=np.ascontiguousarray(scribble),
    )


def augment(
    sample: Sample,
    rng: np.random.Generator,
    crop_max: int = 2,
    out_size: Optional[int] = None,
    flip_p: float = 0.5,
) -> Sample:
    h, w = sample.mask.shape
    if crop_max >= min(h, w) / 4:
        raise ValueError(f"crop_max {crop_max} must be below a quarter of the image size {min(h, w)}")
    out_size = out_size or h

    top, bottom, left, right = (int(rng.integers(0, crop_max + 1)) for _ in range(4))
    rows = slice(top, h - bottom)
    cols = slice(left, w - right)
    cropped = sample.replace(
        image=resize_image(sample.image[:, rows, cols], out_size),
        mask=resize_labels(sample.mask[rows, cols], out_size),
        scribble=resize_labels(sample.scribble[rows, cols], out_size),
    )
    horizontal = rng.random() < flip_p
    vertical = rng.random() < flip_p
    return flip_sample(cropped, horizontal=horizontal, vertical=vertical)
