"""Closed-form derivatives of the trust posterior potential ``H(beta; d)``.

The field potential ``beta * E(psi)`` with ``E(psi) = 1/2 psi^T W L psi`` is
linear in ``beta``, so

    dH/dbeta   = E[E | d, beta] - E[E | beta] + H'(beta)
    d2H/dbeta2 = Var[E | beta] - Var[E | d, beta] + H''(beta)

with every moment available from the Gaussian prior and posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .free_theory import (
    GaussianFieldMeasure,
    ParameterState,
    physics_prior,
    posterior_update,
    residual_data,
)
from .mesh import MeasurementSetup, OperatorMatrix

__all__ = [
    "PotentialCalculusReport",
    "Verdict",
    "prior_expected_energy",
    "prior_energy_variance",
    "posterior_expected_energy",
    "posterior_energy_variance",
    "centered_posterior",
    "potential_calculus",
    "grad_param_potential",
    "grad_covariances",
    "hessian_param_potential",
    "informativeness_check",
    "wellposedness_verdict",
    "bracketed_log_root",
]

_NONLINEAR_MSG = (
    "simultaneous inference of the source and the trust makes the field "
    "potential nonlinear in the parameters; only beta can be inferred"
)


@dataclass(frozen=True)
class PotentialCalculusReport:
    beta: float
    grad: np.ndarray
    hessian: np.ndarray
    prior_expectation: float
    posterior_expectation: float
    prior_cov: float
    posterior_cov: float
    informativeness_margin: float
    prior_grad: float
    prior_hess: float


@dataclass(frozen=True)
class Verdict:
    """Outcome of a well-posedness check over a grid of trust values.

    ``kind`` is ``weakly_well_posed``, ``no_root`` or ``not_convex``.
    """

    kind: str
    beta_star: Optional[float]
    betas: np.ndarray
    grads: np.ndarray
    margins: np.ndarray
    informative: bool

    @property
    def well_posed(self) -> bool:
        return self.kind == "weakly_well_posed"


def bracketed_log_root(g, lo: float, hi: float) -> float:
    """Root of ``g`` in ``[lo, hi]`` (log-space), tolerant of a lost sign change.

    Re-evaluating at ``exp(log beta)`` can shift the endpoints by one ulp; if
    that removes the sign change the endpoint with the smaller ``|g|`` wins.
    """
    ga, gb = g(lo), g(hi)
    if ga == 0.0:
        return lo
    if gb == 0.0:
        return hi
    if ga * gb > 0:
        return lo if abs(ga) <= abs(gb) else hi
    return optimize.brentq(g, lo, hi, xtol=1e-15, rtol=1e-15)


def _check_wrt(wrt):
    if tuple(wrt) != ("beta",):
        raise ValueError(_NONLINEAR_MSG)


def prior_expected_energy(beta: float, n: int) -> float:
    """``E[E(psi) | beta] = 1/2 tr(G L) / beta = n / (2 beta)``."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta!r}")
    return n / (2.0 * beta)


def prior_energy_variance(beta: float, n: int) -> float:
    """``Var[E(psi) | beta] = n / (2 beta^2)``."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta!r}")
    return n / (2.0 * beta**2)


def posterior_expected_energy(posterior: GaussianFieldMeasure, L: OperatorMatrix) -> float:
    """``1/2 m^T W L m + 1/2 tr(W L S~)`` for the posterior ``N(m, S~)`` of psi."""
    A = L.form()
    m = posterior.mean
    if m.shape != (L.n,):
        raise ValueError(f"posterior has {m.size} coefficients, operator is {L.n}")
    return float(0.5 * m @ A @ m + 0.5 * np.sum(A * posterior.covariance))


def posterior_energy_variance(posterior: GaussianFieldMeasure, L: OperatorMatrix) -> float:
    """``m^T A S~ A m + 1/2 tr(A S~ A S~)`` with ``A = W L``."""
    A = L.form()
    m = posterior.mean
    AS = A @ posterior.covariance
    Am = A @ m
    return float(Am @ posterior.covariance @ Am + 0.5 * np.sum(AS * AS.T))


def centered_posterior(state: ParameterState, setup: MeasurementSetup,
                       L: OperatorMatrix, G: OperatorMatrix) -> GaussianFieldMeasure:
    """Posterior of ``psi = phi - G q`` given the residual data ``d - R G q``."""
    prior = physics_prior(L, G, state, centered=True)
    resid = setup.with_data(residual_data(state, setup, G))
    return posterior_update(prior, resid)


def potential_calculus(state: ParameterState, setup: MeasurementSetup,
                       L: OperatorMatrix, G: OperatorMatrix,
                       wrt: Sequence[str] = ("beta",)) -> PotentialCalculusReport:
    """Gradient, Hessian and the moments they are built from, at ``state.beta``."""
    _check_wrt(wrt)
    beta = state.beta
    n = L.n
    post = centered_posterior(state, setup, L, G)
    e_prior = prior_expected_energy(beta, n)
    e_post = posterior_expected_energy(post, L)
    c_prior = prior_energy_variance(beta, n)
    c_post = posterior_energy_variance(post, L)
    pg = state.prior.grad(beta)
    ph = state.prior.hess(beta)
    # E[d2/dbeta2 beta*E(psi)] vanishes: the potential is linear in beta.
    return PotentialCalculusReport(
        beta=beta,
        grad=np.array([e_post - e_prior + pg]),
        hessian=np.array([[c_prior - c_post + ph]]),
        prior_expectation=e_prior,
        posterior_expectation=e_post,
        prior_cov=c_prior,
        posterior_cov=c_post,
        informativeness_margin=c_prior - c_post,
        prior_grad=pg,
        prior_hess=ph,
    )


def grad_param_potential(state, setup, L, G, wrt=("beta",)) -> np.ndarray:
    return potential_calculus(state, setup, L, G, wrt).grad


def grad_covariances(state, setup, L, G):
    """Prior and posterior variances of ``dH(phi; beta)/dbeta = E(psi)``."""
    r = potential_calculus(state, setup, L, G)
    return r.prior_cov, r.posterior_cov


def hessian_param_potential(state, setup, L, G, wrt=("beta",)) -> np.ndarray:
    return potential_calculus(state, setup, L, G, wrt).hessian


def informativeness_check(state, setup, L, G) -> float:
    """Smallest eigenvalue of prior minus posterior gradient covariance.

    Positive means the data are informative at this ``(d, beta)`` only; it
    certifies nothing about other data sets or trust values.
    """
    r = potential_calculus(state, setup, L, G)
    return float(np.linalg.eigvalsh(np.atleast_2d(r.prior_cov - r.posterior_cov))[0])


def wellposedness_verdict(betas, state: ParameterState, setup: MeasurementSetup,
                          L: OperatorMatrix, G: OperatorMatrix, rtol: float = 1e-8) -> Verdict:
    """Check for a unique minimum of ``H(beta; d)`` over a bracketing grid.

    Requires a sign change of the gradient (refined to ``|grad| <= rtol *
    n / (2 beta)``) and a positive informativeness margin at every grid
    point; for the flat prior the latter makes ``H`` strictly convex.
    """
    betas = np.asarray(betas, dtype=float)
    if betas.ndim != 1 or betas.size < 2 or np.any(betas <= 0) or np.any(np.diff(betas) <= 0):
        raise ValueError("beta grid must be strictly increasing positive values (>= 2 points)")
    reports = [potential_calculus(state.with_beta(b), setup, L, G) for b in betas]
    grads = np.array([r.grad[0] for r in reports])
    margins = np.array([r.informativeness_margin for r in reports])
    hess_ok = np.array([r.hessian[0, 0] > 0 for r in reports])
    informative = bool(setup.count > 0 and np.all(margins > 0))

    flips = np.nonzero(np.sign(grads[:-1]) * np.sign(grads[1:]) < 0)[0]
    exact = np.nonzero(grads == 0.0)[0]
    if setup.count == 0 or (flips.size == 0 and exact.size == 0):
        return Verdict("no_root", None, betas, grads, margins, informative)
    convex = informative if state.prior.kind == "flat" else bool(np.all(hess_ok))
    if not convex or flips.size + exact.size > 1:
        return Verdict("not_convex", None, betas, grads, margins, informative)
    if exact.size:
        return Verdict("weakly_well_posed", float(betas[exact[0]]), betas, grads, margins, informative)

    i = flips[0]

    def g(logb):
        return potential_calculus(state.with_beta(math.exp(logb)), setup, L, G).grad[0]

    logb = bracketed_log_root(g, math.log(betas[i]), math.log(betas[i + 1]))
    beta_star = math.exp(logb)
    scale = prior_expected_energy(beta_star, L.n)
    if abs(g(logb)) > rtol * scale:
        return Verdict("no_root", None, betas, grads, margins, informative)
    return Verdict("weakly_well_posed", beta_star, betas, grads, margins, informative)
