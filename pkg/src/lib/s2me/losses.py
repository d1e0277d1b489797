"""
Supervision terms for scribble learning with dual-branch pseudo labels.

L_hybrid = L_scrib + lambda_mt * L_mt + lambda_el * L_el, where L_scrib is
partial cross-entropy on scribbles, L_mt is cross-branch mutual teaching and
L_el is ensemble learning from the fused pseudo label.
"""

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np

from .errors import ShapeError
from .fusion import EntropyMap, PseudoLabel, entropy_map, fuse, pseudo_label
from .numerics import Tensor, as_tensor, log_softmax_channels, softmax_channels

UNLABELED = 2
DICE_EPS = 1e-5
LOSS_TERMS = ("scrib", "mt", "el")


@dataclass(frozen=True)
class ScribbleMask:
    """Sparse labels: 0 background, 1 foreground, 2 unlabeled"""
    labels: np.ndarray

    @property
    def labeled_fraction(self) -> float:
        return float(np.mean(self.labels != UNLABELED)) if self.labels.size else 0.0


@dataclass(frozen=True)
class LossWeights:
    lambda_mt: float
    lambda_el: float

    @classmethod
    def ramped(cls, iteration: int, ramp_iters: int, lambda_max: float, lambda_el_max: Optional[float] = None) -> "LossWeights":
        el_max = lambda_max if lambda_el_max is None else lambda_el_max
        return cls(
            lambda_mt=lambda_rampup(iteration, ramp_iters, lambda_max),
            lambda_el=lambda_rampup(iteration, ramp_iters, el_max),
        )


@dataclass
class DualPrediction:
    """Both branches' outputs plus every derived map used for supervision"""
    l_spa: Tensor
    l_spe: Tensor
    p_spa: Tensor
    p_spe: Tensor
    h_spa: EntropyMap
    h_spe: EntropyMap
    p_fused: np.ndarray
    y_spa: PseudoLabel
    y_spe: PseudoLabel
    y_fused: PseudoLabel


@dataclass
class HybridLoss:
    total: Tensor
    scrib: float
    mt: float
    el: float
    lambda_mt: float
    lambda_el: float

    def as_log(self) -> dict:
        return {
            "loss_total": self.total.item(),
            "loss_scrib": self.scrib,
            "loss_mt": self.mt,
            "loss_el": self.el,
        }


def _labels(target: Union[ScribbleMask, PseudoLabel, np.ndarray]) -> np.ndarray:
    if isinstance(target, ScribbleMask):
        return np.asarray(target.labels)
    if isinstance(target, PseudoLabel):
        return np.asarray(target.labels)
    return np.asarray(target)


def _one_hot(labels: np.ndarray, logits_shape, allowed) -> np.ndarray:
    n, c, h, w = logits_shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels of shape {labels.shape} do not match logits of shape {logits_shape}")
    bad = ~np.isin(labels, allowed)
    if bad.any():
        raise ValueError(f"label values outside {sorted(allowed)}: {sorted(np.unique(labels[bad]).tolist())}")
    return np.stack([(labels == k) for k in range(c)], axis=1).astype(np.float64)


def partial_cross_entropy(logits, scribbles: Union[ScribbleMask, np.ndarray]) -> Tensor:
    """Cross-entropy averaged over labeled pixels only; 0 when nothing is labeled"""
    logits = as_tensor(logits)
    labels = _labels(scribbles)
    target = _one_hot(labels, logits.shape, (0, 1, UNLABELED))
    count = int(np.sum(labels != UNLABELED))
    if count == 0:
        return Tensor(0.0)
    return -(log_softmax_channels(logits) * target).sum() / count


def cross_entropy(logits, target: Union[PseudoLabel, np.ndarray]) -> Tensor:
    logits = as_tensor(logits)
    labels = _labels(target)
    one_hot = _one_hot(labels, logits.shape, (0, 1))
    return -(log_softmax_channels(logits) * one_hot).sum() / labels.size


def dice_loss(p, target: Union[PseudoLabel, np.ndarray]) -> Tensor:
    """1 - soft Dice averaged over both classes and the batch"""
    p = as_tensor(p)
    g = _one_hot(_labels(target), p.shape, (0, 1))
    overlap = (p * g).sum(axis=(2, 3))
    denominator = p.sum(axis=(2, 3)) + g.sum(axis=(2, 3))
    dice = (overlap * 2.0 + DICE_EPS) / (denominator + DICE_EPS)
    return 1.0 - dice.mean()


def _supervise(logits: Tensor, probs: Tensor, target: PseudoLabel) -> Tensor:
    return cross_entropy(logits, target) + dice_loss(probs, target)


def mutual_teaching_loss(l_spa, p_spa, l_spe, p_spe, y_spa: PseudoLabel, y_spe: PseudoLabel) -> Tensor:
    """Each branch learns from the other branch's pseudo label"""
    return _supervise(l_spa, p_spa, y_spe) + _supervise(l_spe, p_spe, y_spa)


def ensemble_loss(l_spa, p_spa, l_spe, p_spe, y_fused: PseudoLabel) -> Tensor:
    """Both branches learn from the fused pseudo label"""
    return _supervise(l_spa, p_spa, y_fused) + _supervise(l_spe, p_spe, y_fused)


def dual_prediction(
    l_spa: Tensor,
    l_spe: Tensor,
    p_spa: Optional[Tensor] = None,
    p_spe: Optional[Tensor] = None,
    fusion: str = "entropy",
    rng: Optional[np.random.Generator] = None,
) -> DualPrediction:
    p_spa = p_spa if p_spa is not None else softmax_channels(l_spa)
    p_spe = p_spe if p_spe is not None else softmax_channels(l_spe)
    p_fused = fuse(fusion, p_spa, p_spe, rng)
    return DualPrediction(
        l_spa=l_spa,
        l_spe=l_spe,
        p_spa=p_spa,
        p_spe=p_spe,
        h_spa=entropy_map(p_spa),
        h_spe=entropy_map(p_spe),
        p_fused=p_fused,
        y_spa=pseudo_label(p_spa),
        y_spe=pseudo_label(p_spe),
        y_fused=pseudo_label(p_fused),
    )


def hybrid_loss(
    l_spa,
    l_spe,
    p_spa,
    p_spe,
    scribbles: Union[ScribbleMask, np.ndarray],
    weights: LossWeights,
    terms: Iterable[str] = LOSS_TERMS,
    fusion: str = "entropy",
    rng: Optional[np.random.Generator] = None,
) -> HybridLoss:
    """Compose the supervision terms and report each one.

    Terms outside `terms` are still evaluated for logging but carry weight 0
    in the total, so the breakdown always satisfies
    total = scrib + lambda_mt * mt + lambda_el * el.
    """
    terms = set(terms)
    unknown = terms - set(LOSS_TERMS)
    if unknown:
        raise ValueError(f"Unknown loss terms: {sorted(unknown)}")
    l_spa, l_spe = as_tensor(l_spa), as_tensor(l_spe)
    pred = dual_prediction(l_spa, l_spe, as_tensor(p_spa), as_tensor(p_spe), fusion=fusion, rng=rng)

    scrib = partial_cross_entropy(l_spa, scribbles) + partial_cross_entropy(l_spe, scribbles)
    mt = mutual_teaching_loss(pred.l_spa, pred.p_spa, pred.l_spe, pred.p_spe, pred.y_spa, pred.y_spe)
    el = ensemble_loss(pred.l_spa, pred.p_spa, pred.l_spe, pred.p_spe, pred.y_fused)

    lambda_mt = weights.lambda_mt if "mt" in terms else 0.0
    lambda_el = weights.lambda_el if "el" in terms else 0.0
    total = scrib if "scrib" in terms else Tensor(0.0)
    if lambda_mt:
        total = total + mt * lambda_mt
    if lambda_el:
        total = total + el * lambda_el

    return HybridLoss(
        total=total,
        scrib=scrib.item(),
        mt=mt.item(),
        el=el.item(),
        lambda_mt=lambda_mt,
        lambda_el=lambda_el,
    )


def lambda_rampup(iteration: int, ramp_iters: int, lambda_max: float) -> float:
    """Gaussian ramp lambda_max * exp(-5 (1 - t/T)^2), flat at lambda_max once t >= T"""
    if ramp_iters <= 0:
        raise ValueError(f"ramp_iters must be positive, got {ramp_iters}")
    if lambda_max <= 0:
        raise ValueError(f"lambda_max must be positive, got {lambda_max}")
    progress = min(max(iteration, 0) / ramp_iters, 1.0)
    return float(lambda_max * math.exp(-5.0 * (1.0 - progress) ** 2))
