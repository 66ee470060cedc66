"""Inference of the model trust and the model-form-error experiment.

The stationarity condition of ``H(beta; d)`` can be solved for
``x = 1/beta``::

    x = m^T W L m / (n - beta tr(W L S~) - c)

with ``c = 0`` for a flat prior and ``c = 2`` for a Jeffreys prior; ``m``
and ``S~`` are the posterior of the residual field ``psi = phi - G q`` at
``beta``. A correct physical model drives ``x`` to zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .calculus import (
    bracketed_log_root,
    centered_posterior,
    potential_calculus,
    prior_expected_energy,
    wellposedness_verdict,
)
from .free_theory import BetaPrior, ParameterState
from .mesh import (
    MeasurementSetup,
    Mesh,
    OperatorMatrix,
    build_measurement,
    design_metrics,
    uniform_design,
)

__all__ = [
    "TrustReport",
    "TrustSolveError",
    "SweepRow",
    "SweepReport",
    "ConvergenceRow",
    "ConvergenceReport",
    "solve_trust",
    "limit_trust",
    "second_derivative_at_optimum",
    "synthesize_data",
    "model_error_sweep",
    "convergence_study",
]

DIVERGED_X = 1e-12
BISECTION_BRACKET = (1e-6, 1e6)


class TrustSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrustReport:
    beta_hat: float
    diverged: bool
    iterations: int
    residual: float
    grad_residual: float
    method: str
    verdict: str
    informativeness_margin: float
    prior_kind: str
    limit_beta: Optional[float] = None
    beta_trace: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["beta_trace"] = list(self.beta_trace)
        for key in ("beta_hat", "limit_beta"):
            if out[key] is not None and math.isinf(out[key]):
                out[key] = "inf"
        return out


def _fixed_point_terms(state, setup, L, G, offset):
    post = centered_posterior(state, setup, L, G)
    A = L.form()
    m = post.mean
    num = float(m @ A @ m)
    denom = L.n - state.beta * float(np.sum(A * post.covariance)) - offset
    return num, denom


def _grad(state, setup, L, G):
    return potential_calculus(state, setup, L, G).grad[0]


def solve_trust(setup: MeasurementSetup, L: OperatorMatrix, G: OperatorMatrix, q,
                prior_kind: str = "flat", *, damping: float = 0.5, tol: float = 1e-10,
                max_iter: int = 200, beta0: float = 1.0, psi_star=None,
                verdict_span: float = 100.0, verdict_points: int = 21) -> TrustReport:
    """Solve for the MAP trust by damped fixed-point iteration on ``1/beta``.

    Falls back to bracketing on the closed-form gradient over
    ``[1e-6, 1e6]`` when the iteration stalls. Divergence (``beta -> inf``)
    is declared once ``1/beta < 1e-12`` while the energy of the posterior
    mean is below ``1e-10 q^T W G q``.
    """
    if prior_kind not in ("flat", "jeffreys"):
        raise ValueError(f"prior_kind must be 'flat' or 'jeffreys', got {prior_kind!r}")
    if setup.count == 0:
        raise ValueError("trust inference needs at least one observation")
    n = L.n
    if prior_kind == "jeffreys" and n <= 2:
        raise ValueError(f"Jeffreys prior needs more than 2 field dimensions, got {n}")
    if not 0 < damping <= 1:
        raise ValueError("damping must be in (0, 1]")
    offset = 2.0 if prior_kind == "jeffreys" else 0.0
    q = np.asarray(q, dtype=float)
    state = ParameterState(beta0, q, BetaPrior(prior_kind))
    q_scale = float((G.weights * q) @ (G.entries @ q))
    if q_scale <= 0:
        q_scale = 1.0

    x = 1.0 / beta0
    trace = []
    method = "fixed_point"
    diverged = converged = False
    residual = math.nan
    it = 0
    for it in range(1, max_iter + 1):
        num, denom = _fixed_point_terms(state.with_beta(1.0 / x), setup, L, G, offset)
        if denom <= 0:
            break
        x_new = (1.0 - damping) * x + damping * num / denom
        residual = abs(x_new - x)
        if x_new < DIVERGED_X and num < 1e-10 * q_scale:
            trace.append(math.inf)
            diverged = True
            break
        trace.append(1.0 / x_new)
        x = x_new
        if residual <= tol * x:
            converged = True
            break

    if diverged:
        beta_hat = math.inf
    elif converged:
        beta_hat = 1.0 / x
    else:
        method = "bisection"
        lo, hi = BISECTION_BRACKET

        def g(logb):
            return _grad(state.with_beta(math.exp(logb)), setup, L, G)

        g_lo, g_hi = g(math.log(lo)), g(math.log(hi))
        if g_lo * g_hi < 0:
            logb = bracketed_log_root(g, math.log(lo), math.log(hi))
            beta_hat = math.exp(logb)
            residual = 0.0
        elif g_hi < 0:
            # walk the bracket up to the divergence threshold before giving up
            b_lo = hi
            beta_hat = None
            while b_lo < 1.0 / DIVERGED_X:
                b_hi = b_lo * 10.0
                if g(math.log(b_hi)) >= 0:
                    logb = bracketed_log_root(g, math.log(b_lo), math.log(b_hi))
                    beta_hat, residual = math.exp(logb), 0.0
                    break
                b_lo = b_hi
                trace.append(b_lo)
            if beta_hat is None:
                num, _ = _fixed_point_terms(state.with_beta(b_lo), setup, L, G, offset)
                if num < 1e-10 * q_scale:
                    beta_hat, diverged = math.inf, True
                    trace.append(math.inf)
                else:
                    raise TrustSolveError(
                        f"gradient still negative at beta={b_lo:g} but the posterior "
                        f"mean keeps energy {num:.3e}"
                    )
        else:
            raise TrustSolveError(
                f"fixed point did not converge in {max_iter} iterations and the "
                f"gradient does not change sign on [{lo:g}, {hi:g}]"
            )

    limit_beta = None
    if psi_star is not None:
        limit_beta = limit_trust(psi_star, L, prior_kind=prior_kind)

    if diverged:
        return TrustReport(math.inf, True, it, float(residual), math.nan, method,
                           "no_root", 0.0, prior_kind, limit_beta, tuple(trace))

    rep = potential_calculus(state.with_beta(beta_hat), setup, L, G)
    grad_res = abs(rep.grad[0]) / prior_expected_energy(beta_hat, n)
    grid = np.geomspace(beta_hat / verdict_span, beta_hat * verdict_span, verdict_points)
    verdict = wellposedness_verdict(grid, state, setup, L, G)
    return TrustReport(beta_hat, False, it, float(residual), float(grad_res), method,
                       verdict.kind, float(rep.informativeness_margin), prior_kind,
                       limit_beta, tuple(trace))


def limit_trust(psi_star, L: OperatorMatrix, n: Optional[int] = None,
                prior_kind: str = "flat") -> float:
    """Infinite-data optimal trust, ``(n - c) / (psi*^T W L psi*)``.

    Returns ``inf`` when the residual field carries no energy.
    """
    psi = np.asarray(psi_star, dtype=float)
    if psi.shape != (L.n,):
        raise ValueError(f"psi_star has shape {psi.shape}, operator is {L.n}")
    n = L.n if n is None else int(n)
    energy = float((L.weights * psi) @ (L.entries @ psi))
    if energy <= 1e-14 * n:
        return math.inf
    if prior_kind == "flat":
        return n / energy
    if prior_kind == "jeffreys":
        if n <= 2:
            raise ValueError("Jeffreys prior needs more than 2 field dimensions")
        return (n - 2) / energy
    raise ValueError(f"unknown prior_kind {prior_kind!r}")


def second_derivative_at_optimum(beta_star: float, n: int, prior_kind: str = "jeffreys") -> float:
    """Closed-form curvature ``1/2 (n - 1) / beta*^2`` at the Jeffreys optimum."""
    if prior_kind != "jeffreys":
        raise ValueError("closed form only holds for the Jeffreys prior")
    if not (beta_star > 0 and math.isfinite(beta_star)):
        raise ValueError(f"beta_star must be finite and positive, got {beta_star!r}")
    return 0.5 * (n - 1) / beta_star**2


def synthesize_data(setup: MeasurementSetup, phi_star, seed) -> MeasurementSetup:
    """Attach ``d = R phi* + sigma * noise`` drawn with ``seed``."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(setup.count) * math.sqrt(setup.noise_variance)
    return setup.with_data(setup.R @ np.asarray(phi_star, dtype=float) + noise)


@dataclass(frozen=True)
class SweepRow:
    scale: float
    beta_hat: float
    diverged: bool
    residual: float
    margin: float
    verdict: str
    limit_beta: float
    status: str


@dataclass(frozen=True)
class SweepReport:
    rows: tuple
    valid: bool
    monotone: bool
    ratios: tuple

    def scaling_ok(self, lo: float = 3.8, hi: float = 4.2) -> bool:
        return bool(self.ratios) and all(lo <= r <= hi for r in self.ratios)


def model_error_sweep(psi0, setup: MeasurementSetup, L: OperatorMatrix, G: OperatorMatrix, q,
                      scales: Sequence[float] = (1.0, 0.5, 0.25, 0.125), seed: int = 0,
                      prior_kind: str = "flat", **solver) -> SweepReport:
    """Solve for the trust on truths ``G q + c psi0`` for each scale ``c``.

    Every member reuses the same noise draw. ``ratios`` holds
    ``beta(c_{i+1}) / beta(c_i)`` for consecutive finite members.
    """
    psi0 = np.asarray(psi0, dtype=float)
    q = np.asarray(q, dtype=float)
    base = G.entries @ q
    rows = []
    for c in scales:
        psi = c * psi0
        data = synthesize_data(setup, base + psi, seed)
        lim = limit_trust(psi, L, prior_kind=prior_kind)
        try:
            rep = solve_trust(data, L, G, q, prior_kind, **solver)
        except (TrustSolveError, np.linalg.LinAlgError) as exc:
            rows.append(SweepRow(c, math.nan, False, math.nan, math.nan, "error", lim, str(exc)))
            continue
        rows.append(SweepRow(c, rep.beta_hat, rep.diverged, rep.residual,
                             rep.informativeness_margin, rep.verdict, lim, "ok"))
    valid = all(r.status == "ok" for r in rows)
    finite = [r for r in rows if r.status == "ok" and not r.diverged]
    ordered = sorted(finite, key=lambda r: -r.scale)
    monotone = valid and all(a.beta_hat < b.beta_hat for a, b in zip(ordered, ordered[1:]))
    ratios = tuple(b.beta_hat / a.beta_hat for a, b in zip(ordered, ordered[1:]))
    return SweepReport(tuple(rows), valid, monotone, ratios)


@dataclass(frozen=True)
class ConvergenceRow:
    density: int
    observations: int
    fill_distance: float
    separation_radius: float
    beta: float
    mean_error: float
    cov_norm: float


@dataclass(frozen=True)
class ConvergenceReport:
    rows: tuple
    mean_slope: float
    cov_slope: float

    @property
    def mean_decreasing(self) -> bool:
        e = [r.mean_error for r in self.rows]
        return all(b < a for a, b in zip(e, e[1:]))

    @property
    def cov_decreasing(self) -> bool:
        e = [r.cov_norm for r in self.rows]
        return all(b < a for a, b in zip(e, e[1:]))


def convergence_study(mesh: Mesh, L: OperatorMatrix, G: OperatorMatrix, q, phi_star,
                      sigma: float, densities: Sequence[int], seed: int = 0,
                      beta: Optional[float] = None, prior_kind: str = "flat") -> ConvergenceReport:
    """Posterior error norms over nested uniform designs.

    Reports ``||psi* - m||_L2`` and ``||S~^{1/2}||_L2 = sqrt(tr(W S~))`` per
    design and their log-log slopes against ``1/h_X``, so a converging
    sequence has negative slopes. With ``beta=None`` the trust is
    re-estimated on every design.
    """
    densities = [int(k) for k in densities]
    if not densities:
        raise ValueError("density list is empty")
    for a, b in zip(densities, densities[1:]):
        if b <= a or b % a:
            raise ValueError(f"designs are not nested: {a} -> {b}")
    q = np.asarray(q, dtype=float)
    psi_star = np.asarray(phi_star, dtype=float) - G.entries @ q
    w = mesh.weights
    rows = []
    for k in densities:
        loc = uniform_design(mesh, k)
        setup = synthesize_data(build_measurement(mesh, loc, sigma**2), phi_star, [seed, k])
        if beta is None:
            rep = solve_trust(setup, L, G, q, prior_kind)
            if rep.diverged:
                raise TrustSolveError(f"trust diverged at density {k}; pass a fixed beta")
            b = rep.beta_hat
        else:
            b = float(beta)
        post = centered_posterior(ParameterState(b, q, BetaPrior(prior_kind)), setup, L, G)
        err = psi_star - post.mean
        metrics = design_metrics(mesh, loc)
        rows.append(ConvergenceRow(
            k, loc.shape[0], metrics.fill_distance,
            metrics.separation_radius if metrics.separation_radius is not None else math.nan,
            b, math.sqrt(float(w @ err**2)), math.sqrt(float(w @ np.diag(post.covariance))),
        ))
    if len(rows) >= 2:
        h = -np.log([r.fill_distance for r in rows])
        mean_slope = float(np.polyfit(h, np.log([r.mean_error for r in rows]), 1)[0])
        cov_slope = float(np.polyfit(h, np.log([r.cov_norm for r in rows]), 1)[0])
    else:
        mean_slope = cov_slope = math.nan
    return ConvergenceReport(tuple(rows), mean_slope, cov_slope)
