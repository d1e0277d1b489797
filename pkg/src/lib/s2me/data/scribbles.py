"""
Synthetic scribble annotations drawn from dense masks
"""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage
from skimage.measure import label as connected_components
from skimage.morphology import skeletonize

from ..losses import UNLABELED, ScribbleMask

logger = logging.getLogger(__name__)

NEIGHBOURS = np.array([(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)])


def largest_component(mask: np.ndarray) -> np.ndarray:
    components = connected_components(mask.astype(bool), connectivity=2)
    if components.max() == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(components.ravel())
    sizes[0] = 0
    return components == sizes.argmax()


def random_walk(allowed: np.ndarray, rng: np.random.Generator, max_steps: int, inertia: float = 0.7) -> np.ndarray:
    """1-px wide 8-connected walk restricted to `allowed`, never revisiting a pixel.

    With probability `inertia` the walk keeps its previous heading when that
    step is available, which gives stroke-like rather than jittery paths.
    """
    path = np.zeros_like(allowed, dtype=bool)
    candidates = np.argwhere(allowed)
    if len(candidates) == 0 or max_steps <= 0:
        return path
    pos = candidates[rng.integers(len(candidates))]
    path[tuple(pos)] = True
    heading: Optional[np.ndarray] = None
    h, w = allowed.shape

    for _ in range(max_steps - 1):
        steps = []
        for step in NEIGHBOURS:
            y, x = pos + step
            if 0 <= y < h and 0 <= x < w and allowed[y, x] and not path[y, x]:
                steps.append(step)
        if not steps:
            break
        keep = heading is not None and any((s == heading).all() for s in steps) and rng.random() < inertia
        heading = heading if keep else steps[rng.integers(len(steps))]
        pos = pos + heading
        path[tuple(pos)] = True
    return path


def generate_scribbles(
    mask: np.ndarray,
    rng: np.random.Generator,
    max_label_fraction: float = 0.05,
    background_margin: float = 3.0,
) -> Tuple[ScribbleMask, bool]:
    """Draw one foreground and one background scribble.

    The foreground stroke walks the skeleton of the largest foreground
    component; the background stroke walks pixels at least
    `background_margin` px from the foreground. Returns the scribble mask and
    a flag that is True when the foreground stroke had to be omitted.
    """
    mask = np.asarray(mask).astype(bool)
    budget = max(2, int(np.floor(max_label_fraction * mask.size)))
    scribble = np.full(mask.shape, UNLABELED, dtype=np.int64)

    flagged = not mask.any()
    fg_path = np.zeros_like(mask)
    if not flagged:
        skeleton = skeletonize(largest_component(mask)) & mask
        fg_path = random_walk(skeleton, rng, budget // 2)
        scribble[fg_path] = 1

    # distance to the nearest foreground pixel; all-background masks get an infinite margin
    if mask.any():
        distance = ndimage.distance_transform_edt(~mask)
    else:
        distance = np.full(mask.shape, np.inf)
    bg_allowed = distance >= background_margin
    bg_path = random_walk(bg_allowed, rng, budget - int(fg_path.sum()))
    scribble[bg_path] = 0

    if flagged:
        logger.warning("Mask has no foreground; foreground scribble omitted")
    return ScribbleMask(scribble), flagged
