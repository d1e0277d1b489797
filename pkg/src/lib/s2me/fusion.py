"""
Pseudo-label fusion
Entropy maps, the three mixing strategies (random, equal, entropy-guided)
and argmax pseudo labels. Everything here works on detached values: no
gradient flows through mixing weights or labels.
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ShapeError
from .numerics import Tensor

EPS_LOG = 1e-8
FUSION_STRATEGIES = ("entropy", "equal", "random")

ArrayOrTensor = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class EntropyMap:
    """Per-pixel Shannon entropy in nats, shape N x H x W"""
    values: np.ndarray


@dataclass(frozen=True)
class PseudoLabel:
    """Argmax class map, shape N x H x W, values in {0, 1}"""
    labels: np.ndarray


def _values(p: ArrayOrTensor) -> np.ndarray:
    return np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)


def _check_probabilities(p: np.ndarray, tol: float = 1e-4) -> None:
    if p.ndim != 4 or p.shape[1] < 2:
        raise ShapeError(f"expected an N x C x H x W probability map with C >= 2, got shape {p.shape}")
    if np.any(p < -tol) or not np.allclose(p.sum(axis=1), 1.0, atol=tol):
        raise ValueError("input is not a probability map: channels must be nonnegative and sum to 1 per pixel")


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"probability maps differ in shape: {a.shape} vs {b.shape}")


def entropy_map(p: ArrayOrTensor) -> EntropyMap:
    p = _values(p)
    _check_probabilities(p)
    return EntropyMap(-(p * np.log(np.clip(p, EPS_LOG, 1.0))).sum(axis=1))


def fuse_entropy(
    p_spa: ArrayOrTensor,
    p_spe: ArrayOrTensor,
    h_spa: Optional[EntropyMap] = None,
    h_spe: Optional[EntropyMap] = None,
) -> np.ndarray:
    """Pixel-wise convex mix weighting each branch by the other branch's entropy.

    The weight on p_spa is H_spe / (H_spa + H_spe); pixels where both
    entropies are zero mix 0.5 / 0.5.
    """
    p_spa, p_spe = _values(p_spa), _values(p_spe)
    _check_pair(p_spa, p_spe)
    h_spa = (h_spa or entropy_map(p_spa)).values
    h_spe = (h_spe or entropy_map(p_spe)).values

    total = h_spa + h_spe
    degenerate = total <= 0.0
    safe_total = np.where(degenerate, 1.0, total)
    w_spa = np.where(degenerate, 0.5, h_spe / safe_total)[:, None]
    w_spe = np.where(degenerate, 0.5, h_spa / safe_total)[:, None]
    return w_spa * p_spa + w_spe * p_spe


def fuse_random(
    p1: ArrayOrTensor,
    p2: ArrayOrTensor,
    rng: Optional[np.random.Generator] = None,
    alpha: Optional[Union[float, np.ndarray]] = None,
) -> np.ndarray:
    """Image-level random mix: one alpha ~ U(0, 1) per batch item.

    Either a seeded `rng` or explicit `alpha` values are required.
    """
    p1, p2 = _values(p1), _values(p2)
    _check_pair(p1, p2)
    if alpha is None:
        if rng is None:
            raise ValueError("fuse_random needs a seeded rng or explicit alpha values")
        alpha = rng.uniform(0.0, 1.0, size=p1.shape[0])
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (p1.shape[0],)).reshape(-1, 1, 1, 1)
    return alpha * p1 + (1.0 - alpha) * p2


def fuse_equal(p1: ArrayOrTensor, p2: ArrayOrTensor) -> np.ndarray:
    p1, p2 = _values(p1), _values(p2)
    _check_pair(p1, p2)
    return (p1 + p2) / 2.0


def fuse(strategy: str, p_spa: ArrayOrTensor, p_spe: ArrayOrTensor, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if strategy == "entropy":
        return fuse_entropy(p_spa, p_spe)
    if strategy == "equal":
        return fuse_equal(p_spa, p_spe)
    if strategy == "random":
        return fuse_random(p_spa, p_spe, rng)
    raise ValueError(f"Unknown fusion strategy: {strategy} (expected one of {FUSION_STRATEGIES})")


def pseudo_label(p: ArrayOrTensor) -> PseudoLabel:
    """Per-pixel argmax over channels; ties go to the lowest class index"""
    p = _values(p)
    if p.ndim != 4:
        raise ShapeError(f"expected an N x C x H x W probability map, got shape {p.shape}")
    return PseudoLabel(p.argmax(axis=1).astype(np.int64))
