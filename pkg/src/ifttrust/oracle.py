"""Brute-force validators: Monte Carlo moments and finite differences.

The closed forms here are the Gaussian quadratic-form identities

    E[1/2 x^T A x]       = 1/2 m^T A m + 1/2 tr(A D)
    E[(1/2 x^T A x)^2]   = 1/4 (m^T A m)^2 + 1/2 (m^T A m) tr(A D)
                           + m^T A D A m + 1/2 tr(A D A D) + 1/4 tr(A D)^2

for ``x ~ N(m, D)``; quadrature weights are expected to be folded into
``A`` by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .free_theory import GaussianFieldMeasure, sample

__all__ = [
    "MCEstimate",
    "FDResult",
    "quadratic_mean_closed",
    "quadratic_second_moment_closed",
    "quadratic_variance_closed",
    "mc_quadratic_mean",
    "mc_quadratic_second_moment",
    "fd_derivative",
]


@dataclass(frozen=True)
class MCEstimate:
    value: float
    std_error: float
    sample_count: int
    seed: int

    def z_score(self, reference: float) -> float:
        if self.std_error == 0:
            return 0.0 if self.value == reference else np.inf
        return abs(self.value - reference) / self.std_error


@dataclass(frozen=True)
class FDResult:
    value: float
    coarse: float
    disagreement: float
    flagged: bool

    def __float__(self):
        return self.value


def _check_symmetric(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or not np.allclose(A, A.T, rtol=1e-12, atol=0):
        raise ValueError("A must be a symmetric square matrix")
    return A


def quadratic_mean_closed(A, m, D) -> float:
    A = _check_symmetric(A)
    m = np.asarray(m, dtype=float)
    return float(0.5 * m @ A @ m + 0.5 * np.trace(A @ D))


def quadratic_second_moment_closed(A, m, D) -> float:
    A = _check_symmetric(A)
    m = np.asarray(m, dtype=float)
    mAm = m @ A @ m
    AD = A @ D
    tr_ad = np.trace(AD)
    return float(
        0.25 * mAm**2
        + 0.5 * mAm * tr_ad
        + m @ AD @ A @ m
        + 0.5 * np.trace(AD @ AD)
        + 0.25 * tr_ad**2
    )


def quadratic_variance_closed(A, m, D) -> float:
    """``Var[1/2 x^T A x] = m^T A D A m + 1/2 tr(A D A D)``."""
    A = _check_symmetric(A)
    m = np.asarray(m, dtype=float)
    AD = A @ D
    return float(m @ AD @ A @ m + 0.5 * np.trace(AD @ AD))


def _half_quadratic(A, x):
    return 0.5 * np.einsum("si,ij,sj->s", x, A, x, optimize=True)


def _estimate(values, seed) -> MCEstimate:
    n = values.size
    return MCEstimate(float(values.mean()), float(values.std(ddof=1) / np.sqrt(n)), n, seed)


def mc_quadratic_mean(A, measure: GaussianFieldMeasure, samples: int, seed: int) -> MCEstimate:
    A = _check_symmetric(A)
    x = sample(measure, samples, seed)
    return _estimate(_half_quadratic(A, x), seed)


def mc_quadratic_second_moment(A, measure: GaussianFieldMeasure, samples: int, seed: int) -> MCEstimate:
    A = _check_symmetric(A)
    x = sample(measure, samples, seed)
    return _estimate(_half_quadratic(A, x) ** 2, seed)


def fd_derivative(f: Callable[[float], float], point: float, order: int = 1,
                  step: float | None = None, flag_tol: float = 1e-4) -> FDResult:
    """Central finite difference with one Richardson extrapolation.

    Default step is ``1e-5 * max(1, |point|)`` for first derivatives and
    ``1e-3 * max(1, |point|)`` for second derivatives (a 1e-5 step leaves
    only ~5 significant digits in a second difference).
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if step is None:
        step = (1e-5 if order == 1 else 1e-3) * max(1.0, abs(point))

    def central(h):
        if order == 1:
            return (f(point + h) - f(point - h)) / (2.0 * h)
        return (f(point + h) - 2.0 * f(point) + f(point - h)) / h**2

    try:
        coarse = central(step)
        fine = central(0.5 * step)
    except Exception as exc:
        raise ArithmeticError(f"function evaluation failed near {point!r}") from exc
    value = (4.0 * fine - coarse) / 3.0
    denom = max(abs(value), np.finfo(float).tiny)
    disagreement = abs(value - coarse) / denom
    return FDResult(float(value), float(coarse), float(disagreement), bool(disagreement > flag_tol))
