import math

import numpy as np
import pytest

from s2me.errors import ShapeError
from s2me.fusion import PseudoLabel
from s2me.losses import (
    UNLABELED,
    LossWeights,
    ScribbleMask,
    cross_entropy,
    dice_loss,
    hybrid_loss,
    lambda_rampup,
    mutual_teaching_loss,
    partial_cross_entropy,
)
from s2me.numerics import Parameter, Tensor, softmax_channels


def _logits_for(*probs):
    """N=1, W=len(probs) logits whose softmax gives each pixel the listed (p0, p1)"""
    p = np.asarray(probs, dtype=np.float64).T.reshape(1, 2, 1, -1)
    return np.log(p)


def test_pce_on_uniform_logits_is_ln2():
    labels = np.array([[[0, 1, UNLABELED, UNLABELED]]])
    loss = partial_cross_entropy(np.zeros((1, 2, 1, 4)), ScribbleMask(labels))
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-6)


def test_pce_without_labels_is_zero():
    labels = np.full((2, 3, 3), UNLABELED)
    assert partial_cross_entropy(np.random.default_rng(0).normal(size=(2, 2, 3, 3)), labels).item() == 0.0


def test_pce_ignores_unlabeled_pixels(rng):
    logits = Parameter(rng.normal(size=(1, 2, 2, 3)), name="logits")
    labels = np.array([[[0, UNLABELED, 1], [UNLABELED, UNLABELED, 0]]])
    partial_cross_entropy(logits, labels).backward()
    unlabeled = np.broadcast_to(labels[:, None] == UNLABELED, logits.shape)
    assert np.all(logits.grad[unlabeled] == 0.0)
    assert np.any(logits.grad[~unlabeled] != 0.0)


def test_pce_rejects_bad_labels():
    with pytest.raises(ValueError):
        partial_cross_entropy(np.zeros((1, 2, 1, 2)), np.array([[[0, 3]]]))
    with pytest.raises(ShapeError):
        partial_cross_entropy(np.zeros((1, 2, 1, 2)), np.array([[0, 1]]))


def test_cross_entropy_hand_value():
    loss = cross_entropy(_logits_for((0.9, 0.1), (0.5, 0.5)), PseudoLabel(np.array([[[0, 1]]])))
    assert loss.item() == pytest.approx(0.399254, abs=1e-5)


def test_cross_entropy_rejects_unlabeled_value():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 2, 1, 2)), np.array([[[0, UNLABELED]]]))


def test_dice_hand_value():
    p = np.full((1, 2, 2, 2), 0.5)
    target = np.array([[[1, 1], [0, 0]]])
    assert dice_loss(p, target).item() == pytest.approx(0.5, abs=1e-5)


def test_dice_perfect_prediction_is_zero():
    target = np.array([[[1, 0], [0, 1]]])
    p = np.stack([target == 0, target == 1], axis=1).astype(float)
    assert dice_loss(p, target).item() == pytest.approx(0.0, abs=1e-6)


def test_mutual_teaching_single_pixel():
    l_spa = Tensor(_logits_for((0.9, 0.1)))
    l_spe = Tensor(_logits_for((0.4, 0.6)))
    p_spa, p_spe = softmax_channels(l_spa), softmax_channels(l_spe)
    y_spa, y_spe = PseudoLabel(np.array([[[0]]])), PseudoLabel(np.array([[[1]]]))

    loss = mutual_teaching_loss(l_spa, p_spa, l_spe, p_spe, y_spa, y_spe).item()
    # spatial branch against label 1: -ln 0.1 + (1 - (0 + 0.2/1.1) / 2)
    # spectral branch against label 0: -ln 0.4 + (1 - (0.8/1.4 + 0) / 2)
    expected = -math.log(0.1) + (1 - 0.2 / 1.1 / 2) - math.log(0.4) + (1 - 0.8 / 1.4 / 2)
    assert loss == pytest.approx(expected, abs=1e-4)


def _batch(rng, n=2, size=4):
    l_spa = Parameter(rng.normal(size=(n, 2, size, size)), name="l_spa")
    l_spe = Parameter(rng.normal(size=(n, 2, size, size)), name="l_spe")
    labels = rng.choice([0, 1, UNLABELED], size=(n, size, size), p=[0.2, 0.2, 0.6])
    return l_spa, l_spe, ScribbleMask(labels)


def test_hybrid_with_zero_weights_is_scribble_loss(rng):
    l_spa, l_spe, scribbles = _batch(rng)
    result = hybrid_loss(
        l_spa, l_spe, softmax_channels(l_spa), softmax_channels(l_spe), scribbles, LossWeights(0.0, 0.0)
    )
    assert result.total.item() == result.scrib
    expected = partial_cross_entropy(l_spa, scribbles).item() + partial_cross_entropy(l_spe, scribbles).item()
    assert result.scrib == pytest.approx(expected, rel=1e-6)


def test_hybrid_breakdown_matches_total(rng):
    l_spa, l_spe, scribbles = _batch(rng)
    result = hybrid_loss(
        l_spa, l_spe, softmax_channels(l_spa), softmax_channels(l_spe), scribbles, LossWeights(2.0, 3.0)
    )
    assert result.total.item() == pytest.approx(result.scrib + 2.0 * result.mt + 3.0 * result.el, rel=1e-5)
    log = result.as_log()
    assert set(log) == {"loss_total", "loss_scrib", "loss_mt", "loss_el"}


def test_hybrid_disabled_terms_are_logged_but_not_weighted(rng):
    l_spa, l_spe, scribbles = _batch(rng)
    result = hybrid_loss(
        l_spa, l_spe, softmax_channels(l_spa), softmax_channels(l_spe), scribbles,
        LossWeights(2.0, 3.0), terms=("scrib", "mt"),
    )
    assert result.lambda_el == 0.0
    assert result.el > 0.0
    assert result.total.item() == pytest.approx(result.scrib + 2.0 * result.mt, rel=1e-5)

    with pytest.raises(ValueError):
        hybrid_loss(l_spa, l_spe, softmax_channels(l_spa), softmax_channels(l_spe), scribbles, LossWeights(1, 1), terms=("kl",))


def test_hybrid_backpropagates_into_both_branches(rng):
    l_spa, l_spe, scribbles = _batch(rng)
    result = hybrid_loss(
        l_spa, l_spe, softmax_channels(l_spa), softmax_channels(l_spe), scribbles, LossWeights(1.0, 1.0)
    )
    result.total.backward()
    assert np.any(l_spa.grad != 0.0)
    assert np.any(l_spe.grad != 0.0)


def test_ramp_values():
    assert lambda_rampup(0, 2500, 5.0) == pytest.approx(0.033690, abs=1e-6)
    assert lambda_rampup(2500, 2500, 5.0) == pytest.approx(5.0, abs=1e-9)
    assert lambda_rampup(5000, 2500, 5.0) == pytest.approx(5.0, abs=1e-9)
    assert LossWeights.ramped(2500, 2500, 5.0) == LossWeights(5.0, 5.0)
    assert LossWeights.ramped(2500, 2500, 5.0, lambda_el_max=1.0) == LossWeights(5.0, 1.0)


def test_ramp_is_monotone():
    values = [lambda_rampup(t, 100, 5.0) for t in range(0, 200, 2)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_ramp_rejects_bad_arguments():
    with pytest.raises(ValueError):
        lambda_rampup(0, 0, 5.0)
    with pytest.raises(ValueError):
        lambda_rampup(0, 10, 0.0)
