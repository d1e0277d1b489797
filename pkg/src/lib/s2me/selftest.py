"""
Release-gate checks: operator gradients, fusion algebra, FFT contracts, metric oracles
"""

import itertools
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .evaluation import boundary, confusion_metrics, hausdorff
from .fusion import entropy_map, fuse_entropy, fuse_equal, fuse_random, pseudo_label
from .losses import LossWeights, dice_loss, hybrid_loss, partial_cross_entropy
from .models import FfcBlockConfig, build_unet, build_ynet, ffc_forward, spectral_conv
from .numerics import (
    ComplexSpectrum,
    Parameter,
    Tensor,
    conv2d,
    grad_check,
    irfft2,
    log_softmax_channels,
    max_pool2d,
    normalize,
    relu,
    rfft2,
    softmax_channels,
    upsample_bilinear2x,
    upsample_nearest2x,
)
from .numerics.spectral import _hermitian_weights

logger = logging.getLogger(__name__)

GradCase = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Parameter]]]

GRAD_SEEDS = (0, 1, 2)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def _param(rng, shape, name, scale=1.0) -> Parameter:
    return Parameter(rng.normal(0.0, scale, shape), name=name)


def _dim(rng, low: int, high: int) -> int:
    return int(rng.integers(low, high + 1))


def _projected(out: Tensor, rng) -> Tensor:
    """Contract an output with a fixed random tensor so every entry matters"""
    return (out * rng.normal(size=out.shape)).sum()


def _conv_case(rng):
    n, c_in, c_out = _dim(rng, 1, 2), _dim(rng, 1, 3), _dim(rng, 1, 4)
    k = int(rng.choice([1, 3]))
    x = _param(rng, (n, c_in, _dim(rng, 3, 7), _dim(rng, 3, 7)), "x")
    w, b = _param(rng, (c_out, c_in, k, k), "weight", 0.3), _param(rng, (c_out,), "bias")
    return (lambda: _projected(conv2d(x, w, b, padding=k // 2), np.random.default_rng(1))), [x, w, b]


def _relu_case(rng):
    data = rng.normal(size=(_dim(rng, 1, 2), _dim(rng, 1, 3), _dim(rng, 2, 6), _dim(rng, 2, 6)))
    data[np.abs(data) < 0.05] += 0.2
    x = Parameter(data, name="x")
    return (lambda: _projected(relu(x), np.random.default_rng(2))), [x]


def _pool_case(rng):
    x = _param(rng, (_dim(rng, 1, 2), _dim(rng, 1, 3), 2 * _dim(rng, 1, 3), 2 * _dim(rng, 1, 3)), "x")
    return (lambda: _projected(max_pool2d(x), np.random.default_rng(3))), [x]


def _bilinear_case(rng):
    x = _param(rng, (_dim(rng, 1, 2), _dim(rng, 1, 3), _dim(rng, 2, 5), _dim(rng, 2, 5)), "x")
    return (lambda: _projected(upsample_bilinear2x(x), np.random.default_rng(4))), [x]


def _nearest_case(rng):
    x = _param(rng, (_dim(rng, 1, 2), _dim(rng, 1, 3), _dim(rng, 2, 5), _dim(rng, 2, 5)), "x")
    return (lambda: _projected(upsample_nearest2x(x), np.random.default_rng(5))), [x]


def _normalize_case(rng):
    x = _param(rng, (_dim(rng, 2, 3), _dim(rng, 1, 3), _dim(rng, 2, 4), _dim(rng, 2, 4)), "x")
    return (lambda: _projected(normalize(x, axes=(0, 2, 3))[0], np.random.default_rng(6))), [x]


def _logits(rng, name="logits", classes=None) -> Parameter:
    classes = classes or _dim(rng, 2, 4)
    return _param(rng, (_dim(rng, 1, 3), classes, _dim(rng, 2, 5), _dim(rng, 2, 5)), name)


def _softmax_case(rng):
    x = _logits(rng)
    return (lambda: _projected(softmax_channels(x), np.random.default_rng(7))), [x]


def _log_softmax_case(rng):
    x = _logits(rng)
    return (lambda: _projected(log_softmax_channels(x), np.random.default_rng(8))), [x]


def _rfft2_case(rng):
    x = _param(rng, (_dim(rng, 1, 2), _dim(rng, 1, 3), _dim(rng, 2, 7), _dim(rng, 2, 7)), "x")

    def f():
        spectrum = rfft2(x)
        r = np.random.default_rng(9)
        return _projected(spectrum.real, r) + _projected(spectrum.imag, r)

    return f, [x]


def _irfft2_case(rng):
    width = _dim(rng, 2, 7)
    shape = (1, _dim(rng, 1, 3), _dim(rng, 2, 6), width // 2 + 1)
    real, imag = _param(rng, shape, "real"), _param(rng, shape, "imag")
    return (lambda: _projected(irfft2(ComplexSpectrum(real, imag), out_width=width), np.random.default_rng(10))), [real, imag]


def _spectral_conv_case(rng):
    channels = _dim(rng, 1, 3)
    x = _param(rng, (1, channels, _dim(rng, 2, 6), _dim(rng, 2, 6)), "x")
    w = _param(rng, (2 * channels, 2 * channels, 1, 1), "spectral", 0.5)
    return (lambda: _projected(spectral_conv(x, w), np.random.default_rng(11))), [x, w]


def _ffc_case(rng):
    config = FfcBlockConfig(2 * _dim(rng, 1, 3), 0.5)
    n_local, n_global = config.local_channels, config.global_channels
    params = {
        "l2l": _param(rng, (n_local, n_local, 3, 3), "l2l", 0.3),
        "g2l": _param(rng, (n_local, n_global, 3, 3), "g2l", 0.3),
        "l2g": _param(rng, (n_global, n_local, 3, 3), "l2g", 0.3),
        "spectral": _param(rng, (2 * n_global, 2 * n_global, 1, 1), "spectral", 0.3),
    }
    x = _param(rng, (1, config.channels, _dim(rng, 4, 6), _dim(rng, 4, 6)), "x")
    f = lambda: _projected(ffc_forward(x, config, params, activate=False), np.random.default_rng(12))
    return f, [x, *params.values()]


def _scribbles(rng, shape):
    labels = rng.integers(0, 3, size=shape)
    labels[0, 0, 0], labels[0, 0, 1] = 0, 1
    return labels


def _pce_case(rng):
    logits = _logits(rng, classes=2)
    labels = _scribbles(rng, (logits.shape[0],) + logits.shape[2:])
    return (lambda: partial_cross_entropy(logits, labels)), [logits]


def _dice_case(rng):
    logits = _logits(rng, classes=2)
    target = rng.integers(0, 2, size=(logits.shape[0],) + logits.shape[2:])
    return (lambda: dice_loss(softmax_channels(logits), target)), [logits]


def _hybrid_case(rng):
    l_spa = _logits(rng, "l_spa", classes=2)
    l_spe = _param(rng, l_spa.shape, "l_spe")
    labels = _scribbles(rng, (l_spa.shape[0],) + l_spa.shape[2:])
    weights = LossWeights(0.7, 0.4)

    def f():
        return hybrid_loss(l_spa, l_spe, softmax_channels(l_spa), softmax_channels(l_spe), labels, weights).total

    return f, [l_spa, l_spe]


GRAD_CASES: Dict[str, GradCase] = {
    "conv2d": _conv_case,
    "relu": _relu_case,
    "max_pool2d": _pool_case,
    "upsample_bilinear2x": _bilinear_case,
    "upsample_nearest2x": _nearest_case,
    "normalize": _normalize_case,
    "softmax_channels": _softmax_case,
    "log_softmax_channels": _log_softmax_case,
    "rfft2": _rfft2_case,
    "irfft2": _irfft2_case,
    "spectral_conv": _spectral_conv_case,
    "ffc_forward": _ffc_case,
    "partial_cross_entropy": _pce_case,
    "dice_loss": _dice_case,
    "hybrid_loss": _hybrid_case,
}


def check_gradient(case: GradCase, seeds: Sequence[int] = GRAD_SEEDS) -> Tuple[bool, str]:
    """Gradient-check one case on a fresh random shape per seed"""
    passed, details = True, []
    for seed in seeds:
        f, params = case(np.random.default_rng(seed))
        report = grad_check(f, params, tol=1e-3)
        passed = passed and report.passed
        details.append(f"seed {seed} {tuple(params[0].shape)}: {report.summary()}")
    return passed, "; ".join(details)


def branch_pair_case(rng: np.random.Generator, size: int = 16):
    """Hybrid loss through a batch-norm UNet and YNet on one size x size image"""
    spa = build_unet(base_width=2, depth=2, seed=int(rng.integers(1 << 16)), norm="batch")
    spe = build_ynet(base_width=2, depth=2, seed=int(rng.integers(1 << 16)), norm="batch")
    image = rng.uniform(size=(1, 3, size, size))
    labels = _scribbles(rng, (1, size, size))
    weights = LossWeights(0.7, 0.4)

    def f():
        l_spa, l_spe = spa(image), spe(image)
        return hybrid_loss(
            l_spa, l_spe, softmax_channels(l_spa), softmax_channels(l_spe), labels, weights, terms=("scrib", "mt", "el")
        ).total

    return f, spa.parameters() + spe.parameters()


def check_hybrid_end_to_end(seed: int = 0) -> Tuple[bool, str]:
    f, params = branch_pair_case(np.random.default_rng(seed))
    # eps well below the ReLU kink and argmax-flip scale
    report = grad_check(f, params, eps=1e-7, tol=1e-3, max_coords=3, seed=seed)
    return report.passed, report.summary()


def _random_probs(rng, n: int) -> np.ndarray:
    a = rng.uniform(0.0, 1.0, size=(n, 1, 1, 1))
    return np.concatenate([a, 1.0 - a], axis=1)


def check_fusion_algebra(cases: int = 10_000, seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    p1, p2 = _random_probs(rng, cases), _random_probs(rng, cases)
    problems = []

    fused = fuse_entropy(p1, p2)
    if np.max(np.abs(fused.sum(axis=1) - 1.0)) > 1e-6:
        problems.append("fused channels do not sum to 1")
    if not np.array_equal(fused, fuse_entropy(p2, p1)):
        problems.append("fusion is not symmetric under branch swap")

    mirrored = p1[:, ::-1]
    if np.max(np.abs(fuse_entropy(p1, mirrored) - (p1 + mirrored) / 2.0)) > 1e-6:
        problems.append("equal entropies do not give the mean")

    certain = np.zeros_like(p1)
    certain[:, 0] = 1.0
    uncertain = entropy_map(p2).values[:, 0, 0] > 0
    if not np.array_equal(fuse_entropy(certain, p2)[uncertain], certain[uncertain]):
        problems.append("a zero-entropy branch does not dominate")
    return not problems, "; ".join(problems) or f"{cases} random pixel cases"


ORACLE_CLASSES = 3
# confident branch: truth class at least this likely, the rest on one rival class
ORACLE_MIN_CONFIDENCE = 0.65
# near-uniform branch: one class raised by up to this much, another lowered by as much
ORACLE_MAX_SPREAD = 0.2


def confident_pixel(truth: int, confidence: float, rival: int, spread: float, order: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """One pixel where one branch is confident and correct and the other is near-uniform.

    `order` permutes the near-uniform profile (1/K - spread, 1/K + spread, 1/K, ...)
    over the classes, so the raised class can be any of them.
    """
    k = ORACLE_CLASSES
    confident = np.zeros(k)
    confident[truth] = confidence
    confident[rival] += 1.0 - confidence
    profile = np.full(k, 1.0 / k)
    profile[0] -= spread
    profile[1] += spread
    return confident, profile[list(order)]


def oracle_cases(
    confidences: Sequence[float],
    spreads: Sequence[float],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Every (truth, rival, confidence, spread, permutation, branch) combination as 1 x 1 pixels"""
    p_spa, p_spe, truth = [], [], []
    classes = range(ORACLE_CLASSES)
    for y, rival, c, s, order, confident_spatial in itertools.product(
        classes, classes, confidences, spreads, itertools.permutations(classes), (True, False)
    ):
        if rival == y:
            continue
        confident, uniform = confident_pixel(y, c, rival, s, order)
        p_spa.append(confident if confident_spatial else uniform)
        p_spe.append(uniform if confident_spatial else confident)
        truth.append(y)
    shape = (-1, ORACLE_CLASSES, 1, 1)
    return np.reshape(p_spa, shape), np.reshape(p_spe, shape), np.reshape(truth, (-1, 1, 1))


def oracle_accuracies(p_spa: np.ndarray, p_spe: np.ndarray, truth: np.ndarray, alpha_steps: int = 200) -> Dict[str, float]:
    """Pseudo-label pixel accuracy per strategy; random mixing averaged over a midpoint grid of alpha"""

    def accuracy(p):
        return float(np.mean(pseudo_label(p).labels == truth))

    alphas = (np.arange(alpha_steps) + 0.5) / alpha_steps
    return {
        "entropy": accuracy(fuse_entropy(p_spa, p_spe)),
        "equal": accuracy(fuse_equal(p_spa, p_spe)),
        "random": float(np.mean([accuracy(fuse_random(p_spa, p_spe, alpha=a)) for a in alphas])),
    }


def check_fusion_oracle(steps: int = 8) -> Tuple[bool, str]:
    confidences = np.linspace(ORACLE_MIN_CONFIDENCE, 1.0, steps)
    spreads = np.linspace(0.0, ORACLE_MAX_SPREAD, steps)
    acc = oracle_accuracies(*oracle_cases(confidences, spreads))
    problems = []
    if acc["entropy"] < acc["random"]:
        problems.append("entropy fusion below expected random mixing")
    if not acc["entropy"] > acc["equal"]:
        problems.append("entropy fusion does not beat equal mixing")
    summary = ", ".join(f"{k} {v:.4f}" for k, v in acc.items())
    return not problems, "; ".join(problems + [summary])


def check_fft(max_size: int = 16, seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_roundtrip, worst_parseval = 0.0, 0.0
    for h, w in itertools.product(range(2, max_size + 1), repeat=2):
        x = rng.normal(size=(1, 1, h, w))
        spectrum = rfft2(Tensor(x))
        back = irfft2(spectrum, out_width=w).numpy()
        worst_roundtrip = max(worst_roundtrip, float(np.max(np.abs(back - x))))
        power = np.abs(spectrum.to_complex()) ** 2
        parseval = float((power * _hermitian_weights(w, power.shape[-1])).sum() / (h * w))
        energy = float((x ** 2).sum())
        worst_parseval = max(worst_parseval, abs(parseval - energy) / energy)
    passed = worst_roundtrip < 1e-4 and worst_parseval < 1e-4
    return passed, f"roundtrip max error {worst_roundtrip:.2e}, Parseval relative error {worst_parseval:.2e}"


def brute_force_hausdorff(pred: np.ndarray, gt: np.ndarray) -> float:
    """Percentile-100 oracle over every boundary pixel pair"""
    a = [tuple(p) for p in np.argwhere(boundary(pred))]
    b = [tuple(p) for p in np.argwhere(boundary(gt))]
    forward = max(min(np.hypot(p[0] - q[0], p[1] - q[1]) for q in b) for p in a)
    backward = max(min(np.hypot(p[0] - q[0], p[1] - q[1]) for p in a) for q in b)
    return float(max(forward, backward))


def check_metrics(instances: int = 300, seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    problems = []
    for _ in range(instances):
        size = int(rng.integers(3, 13))
        pred, gt = np.zeros((size, size), bool), np.zeros((size, size), bool)
        for mask in (pred, gt):
            count = int(rng.integers(1, 7))
            mask.flat[rng.choice(size * size, size=count, replace=False)] = True
        oracle = brute_force_hausdorff(pred, gt)
        if abs(hausdorff(pred, gt, 100.0) - oracle) > 1e-9:
            problems.append(f"hausdorff disagrees with all-pairs oracle on a {size}x{size} instance")
            break
        dsc, iou, _ = confusion_metrics(pred, gt)
        if abs(dsc - 2 * iou / (1 + iou)) > 1e-9:
            problems.append("dsc != 2 iou / (1 + iou)")
            break

    gt = np.zeros((4, 4), bool)
    gt[:2] = True
    pred = np.zeros((4, 4), bool)
    pred[0] = True
    pred[2] = True
    if confusion_metrics(pred, gt) != (0.5, 1 / 3, 0.5):
        problems.append(f"worked confusion example gave {confusion_metrics(pred, gt)}")
    return not problems, "; ".join(problems) or f"{instances} random instances"


def _registry(grad_cases: Mapping[str, GradCase]) -> Dict[str, Callable[[], Tuple[bool, str]]]:
    checks = {f"grad:{name}": (lambda case=case: check_gradient(case)) for name, case in grad_cases.items()}
    checks["grad:hybrid_end_to_end"] = check_hybrid_end_to_end
    checks["fusion:algebra"] = check_fusion_algebra
    checks["fusion:oracle"] = check_fusion_oracle
    checks["fft:contracts"] = check_fft
    checks["metrics:oracles"] = check_metrics
    return checks


def run_selftest(name_filter: Optional[str] = None, grad_cases: Optional[Mapping[str, GradCase]] = None) -> List[CheckResult]:
    """Run every registered check whose name contains `name_filter`"""
    checks = _registry(GRAD_CASES if grad_cases is None else grad_cases)
    selected = {n: c for n, c in checks.items() if not name_filter or name_filter in n}
    results = []
    for name, check in selected.items():
        start = time.time()
        try:
            passed, detail = check()
        except Exception as e:
            passed, detail = False, f"{type(e).__name__}: {e}"
        result = CheckResult(name, passed, detail, time.time() - start)
        (logger.info if passed else logger.error)(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        results.append(result)
    return results
