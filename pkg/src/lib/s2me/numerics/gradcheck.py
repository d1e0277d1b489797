"""
Central finite-difference verification of reverse-mode gradients.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from ..errors import GradCheckError
from .tensor import Parameter, Tensor, no_grad, precision

logger = logging.getLogger(__name__)


@dataclass
class CoordinateCheck:
    parameter: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    eps: float
    checked: int
    worst: Optional[CoordinateCheck] = None
    failures: List[CoordinateCheck] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        if self.worst is None:
            return f"{status}: no coordinates checked"
        w = self.worst
        return (
            f"{status}: {self.checked} coordinates, worst {w.parameter}[{w.index}] "
            f"analytic={w.analytic:.6g} numeric={w.numeric:.6g} rel={w.rel_error:.3g} (tol {self.tol:g})"
        )


def _scalar(value) -> float:
    result = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(result):
        raise GradCheckError(f"function under check returned a non-finite value: {result}")
    return result


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: Optional[float] = None,
    tol: float = 1e-3,
    atol: float = 1e-6,
    max_coords: int = 32,
    seed: int = 0,
    shadow_64: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients of scalar `f()` with central differences.

    Parameters with more than `max_coords` entries are checked on a random
    subsample of that size. With `shadow_64` the whole computation runs in
    float64, which is what makes a 1e-3 relative tolerance meaningful.
    """
    dtype = np.float64 if shadow_64 else np.float32
    if eps is None:
        eps = 1e-6 if shadow_64 else 1e-3
    rng = np.random.default_rng(seed)

    originals = [p.data for p in params]
    checks: List[CoordinateCheck] = []
    try:
        with precision(dtype):
            for p in params:
                p.data = p.data.astype(dtype)
                p.zero_grad()

            loss = f()
            _scalar(loss)
            loss.backward()
            analytic = [p.gradient.astype(np.float64).reshape(-1) for p in params]

            with no_grad():
                for p, grad in zip(params, analytic):
                    flat = p.data.reshape(-1)
                    if flat.size <= max_coords:
                        coords = np.arange(flat.size)
                    else:
                        coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                    for i in coords:
                        saved = flat[i]
                        flat[i] = saved + eps
                        upper = _scalar(f())
                        flat[i] = saved - eps
                        lower = _scalar(f())
                        flat[i] = saved
                        numeric = (upper - lower) / (2 * eps)
                        a = float(grad[i])
                        scale = max(abs(a), abs(numeric), atol)
                        checks.append(CoordinateCheck(p.name or "<unnamed>", int(i), a, numeric, abs(a - numeric) / scale))
    finally:
        for p, data in zip(params, originals):
            p.data = data
            p.zero_grad()

    failures = [
        c for c in checks
        if abs(c.analytic - c.numeric) > tol * max(abs(c.analytic), abs(c.numeric)) + atol
    ]
    worst = max(checks, key=lambda c: c.rel_error) if checks else None
    report = GradCheckReport(
        passed=not failures, tol=tol, eps=eps, checked=len(checks), worst=worst, failures=failures
    )
    if not report.passed:
        logger.warning(f"Gradient check failed: {report.summary()}")
    return report
