"""Gaussian field measures on the mesh and the exact free-theory algebra.

A :class:`GaussianFieldMeasure` stores the covariance of the node
coefficients, i.e. the kernel values ``s(x_i, x_j)``. As an operator under
the quadrature pairing it acts as ``S = K W``; the physics prior with
operator covariance ``G / beta`` therefore has kernel matrix
``K = G W^{-1} / beta`` and precision ``beta W L``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg as sla

from .mesh import MeasurementSetup, OperatorMatrix

__all__ = [
    "BetaPrior",
    "ParameterState",
    "GaussianFieldMeasure",
    "FactorizationError",
    "JITTER_LADDER",
    "physics_prior",
    "posterior_update",
    "factorize",
    "sample",
    "log_partition",
    "residual_data",
    "marginal_neg_log_posterior",
    "joint_potential",
]

JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8)


class FactorizationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class BetaPrior:
    """Prior on the trust: ``flat``, ``jeffreys`` (``p ~ 1/beta``) or ``gaussian``."""

    kind: str = "flat"
    mean: float = 0.0
    variance: float = 1.0

    def __post_init__(self):
        if self.kind not in ("flat", "jeffreys", "gaussian"):
            raise ValueError(f"unknown beta prior {self.kind!r}")
        if self.kind == "gaussian" and not self.variance > 0:
            raise ValueError("gaussian beta prior needs a positive variance")

    def potential(self, beta: float) -> float:
        if self.kind == "flat":
            return 0.0
        if self.kind == "jeffreys":
            return math.log(beta)
        return 0.5 * (beta - self.mean) ** 2 / self.variance

    def grad(self, beta: float) -> float:
        if self.kind == "flat":
            return 0.0
        if self.kind == "jeffreys":
            return 1.0 / beta
        return (beta - self.mean) / self.variance

    def hess(self, beta: float) -> float:
        if self.kind == "flat":
            return 0.0
        if self.kind == "jeffreys":
            return -1.0 / beta**2
        return 1.0 / self.variance


@dataclass(frozen=True)
class ParameterState:
    """The parameters ``lambda = (q, beta)``; only ``beta`` is ever inferred."""

    beta: float
    source: np.ndarray
    prior: BetaPrior = field(default_factory=BetaPrior)

    def __post_init__(self):
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be in (0, inf), got {self.beta!r}")
        q = np.asarray(self.source, dtype=float)
        q.setflags(write=False)
        object.__setattr__(self, "source", q)
        if isinstance(self.prior, str):
            object.__setattr__(self, "prior", BetaPrior(self.prior))

    def with_beta(self, beta: float) -> "ParameterState":
        return replace(self, beta=float(beta))


@dataclass(frozen=True)
class GaussianFieldMeasure:
    """``N(mean, covariance)`` over node coefficients.

    ``precision`` is carried when it is known in closed form, which avoids
    inverting the covariance in the posterior update.
    """

    mean: np.ndarray
    covariance: np.ndarray
    jitter_used: float = 0.0
    precision: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).reshape(-1)
        C = np.asarray(self.covariance, dtype=float)
        if C.shape != (m.size, m.size):
            raise ValueError(f"covariance shape {C.shape} does not match mean length {m.size}")
        scale = max(np.max(np.abs(C), initial=0.0), np.finfo(float).tiny)
        if np.max(np.abs(C - C.T), initial=0.0) > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        m.setflags(write=False)
        C.setflags(write=False)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", C)

    @property
    def n(self) -> int:
        return self.mean.size


def _check_beta(beta):
    if not (beta > 0 and math.isfinite(beta)):
        raise ValueError(f"beta must be in (0, inf), got {beta!r}")


def physics_prior(L: OperatorMatrix, G: OperatorMatrix, state: ParameterState,
                  centered: bool = False) -> GaussianFieldMeasure:
    """Physics-informed prior ``N(G q, G / beta)``.

    With ``centered=True`` the mean is dropped, giving the prior of the
    residual field ``psi = phi - G q``.
    """
    _check_beta(state.beta)
    q = state.source
    if q.shape != (L.n,):
        raise ValueError(f"source has shape {q.shape}, operator is {L.n}")
    w = G.weights
    K = G.entries / (state.beta * w[None, :])
    K = 0.5 * (K + K.T)
    P = state.beta * L.form()
    P = 0.5 * (P + P.T)
    mean = np.zeros(L.n) if centered else G.entries @ q
    return GaussianFieldMeasure(mean, K, precision=P)


def _chol_with_jitter(A: np.ndarray, ladder=JITTER_LADDER):
    n = A.shape[0]
    scale = np.trace(A) / n if n else 0.0
    if scale <= 0:
        scale = 1.0
    for j in ladder:
        try:
            return sla.cholesky(A + j * scale * np.eye(n), lower=True), j * scale
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(
        f"Cholesky failed after maximum jitter {ladder[-1] * scale:.3e}"
    )


def factorize(measure: GaussianFieldMeasure):
    """Lower Cholesky factor of the covariance and the jitter that was needed."""
    C = measure.covariance
    if not np.any(C):
        return np.zeros_like(C), 0.0
    return _chol_with_jitter(C)


def posterior_update(prior: GaussianFieldMeasure, setup: MeasurementSetup) -> GaussianFieldMeasure:
    """Condition a Gaussian field on linear Gaussian data.

    Uses the information form ``S~ = (S^{-1} + R^T Gamma^{-1} R)^{-1}``,
    applied to the residual ``d - R m`` so a non-zero prior mean is restored
    afterwards.
    """
    if setup.data is None:
        raise ValueError("measurement setup carries no data")
    R = setup.R
    if R.shape[1] != prior.n:
        raise ValueError(f"R has {R.shape[1]} columns, field has {prior.n} coefficients")
    if not setup.noise_variance > 0:
        raise ValueError("noise covariance must be positive definite")
    jitter = 0.0
    if prior.precision is not None:
        P = prior.precision
    else:
        Lc, jitter = _chol_with_jitter(prior.covariance)
        P = sla.cho_solve((Lc, True), np.eye(prior.n))
    A = P + (R.T @ R) / setup.noise_variance
    A = 0.5 * (A + A.T)
    Lc, j2 = _chol_with_jitter(A, ladder=(0.0,))
    cov = sla.cho_solve((Lc, True), np.eye(prior.n))
    cov = 0.5 * (cov + cov.T)
    resid = setup.data - R @ prior.mean
    mean = prior.mean + sla.cho_solve((Lc, True), R.T @ resid) / setup.noise_variance
    return GaussianFieldMeasure(mean, cov, jitter_used=jitter + j2, precision=A)


def sample(measure: GaussianFieldMeasure, count: int, seed) -> np.ndarray:
    """Draw ``count`` fields, shape ``(count, n)``; deterministic given ``seed``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    chol, _ = factorize(measure)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, measure.n))
    return measure.mean + z @ chol.T


def log_partition(L: OperatorMatrix, state_or_beta) -> float:
    """``log Z(beta)`` of the centered potential ``1/2 beta psi^T W L psi``."""
    beta = getattr(state_or_beta, "beta", state_or_beta)
    _check_beta(beta)
    n = L.n
    sign, logdet = np.linalg.slogdet(L.form())
    if sign <= 0:
        raise ValueError("L is not positive definite")
    return 0.5 * n * math.log(2.0 * math.pi) - 0.5 * n * math.log(beta) - 0.5 * logdet


def residual_data(state: ParameterState, setup: MeasurementSetup, G: OperatorMatrix) -> np.ndarray:
    """Data with the physics solution removed, ``d - R G q``."""
    if setup.data is None:
        raise ValueError("measurement setup carries no data")
    return setup.data - setup.R @ (G.entries @ state.source)


def marginal_neg_log_posterior(state: ParameterState, setup: MeasurementSetup,
                               L: OperatorMatrix, G: OperatorMatrix) -> float:
    """Exact ``H(beta; d)`` from the Gaussian evidence.

    ``1/2 r^T M^{-1} r + 1/2 log det(2 pi M) + H(beta)`` with
    ``M = R K R^T + Gamma`` and ``r = d - R G q``.
    """
    _check_beta(state.beta)
    r = residual_data(state, setup, G)
    if r.size == 0:
        return float(state.prior.potential(state.beta))
    K = G.entries / (state.beta * G.weights[None, :])
    M = setup.R @ K @ setup.R.T + setup.Gamma
    M = 0.5 * (M + M.T)
    try:
        c = sla.cholesky(M, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("marginal data covariance is not positive definite") from exc
    alpha = sla.solve_triangular(c, r, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    k = r.size
    return float(
        0.5 * alpha @ alpha + 0.5 * logdet + 0.5 * k * math.log(2.0 * math.pi)
        + state.prior.potential(state.beta)
    )


def joint_potential(phi, state: ParameterState, setup: MeasurementSetup,
                    L: OperatorMatrix, G: OperatorMatrix) -> float:
    """Joint potential ``H(d; phi) + beta E(psi) + log Z(beta) + H(beta)``.

    ``psi = phi - G q``. The likelihood keeps its normalizing constant, so
    integrating ``exp(-joint)`` over the coefficients gives
    ``exp(-marginal_neg_log_posterior)`` exactly.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (L.n,):
        raise ValueError(f"phi has shape {phi.shape}, operator is {L.n}")
    if setup.data is None:
        raise ValueError("measurement setup carries no data")
    psi = phi - G.entries @ state.source
    misfit = setup.data - setup.R @ phi
    k = misfit.size
    h_data = 0.5 * misfit @ misfit / setup.noise_variance + 0.5 * k * math.log(
        2.0 * math.pi * setup.noise_variance
    )
    h_field = 0.5 * state.beta * (L.weights * psi) @ (L.entries @ psi)
    return float(h_data + h_field + log_partition(L, state.beta) + state.prior.potential(state.beta))
