"""Self-check suite: closed forms against Monte Carlo and finite differences.

Each check returns a :class:`CheckResult` with a pass/fail status and the
worst deviation seen. All randomness derives from one integer seed, so a
repeated run reproduces the report bit for bit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .calculus import potential_calculus, prior_expected_energy
from .free_theory import (
    GaussianFieldMeasure,
    ParameterState,
    log_partition,
    marginal_neg_log_posterior,
)
from .mesh import build_laplacian, build_measurement, build_mesh, green_operator, uniform_design
from .oracle import (
    fd_derivative,
    mc_quadratic_mean,
    mc_quadratic_second_moment,
    quadratic_mean_closed,
    quadratic_second_moment_closed,
)
from .trust import synthesize_data

__all__ = [
    "CheckResult",
    "random_quadratic_instance",
    "check_quadratic_mean",
    "check_quadratic_second_moment",
    "gradient_fixture",
    "check_gradient_fd",
    "check_hessian_fd",
    "check_partition_derivative",
    "run_verification",
]

VERIFY_BETAS = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst_deviation: float
    threshold: float
    detail: dict

    def to_dict(self) -> dict:
        out = asdict(self)
        out["status"] = "pass" if self.passed else "fail"
        del out["passed"]
        return out


def random_quadratic_instance(rng, dim: int = 5):
    """Random symmetric ``A`` (indefinite in general), mean ``m`` and SPD ``D``."""
    B = rng.standard_normal((dim, dim))
    A = 0.5 * (B + B.T)
    m = rng.standard_normal(dim)
    C = rng.standard_normal((dim, dim))
    D = C @ C.T / dim + 0.1 * np.eye(dim)
    return A, m, 0.5 * (D + D.T)


def _mc_check(name, estimator, closed, seed, instances, samples, band=3.0, quota=0.95):
    z = np.empty(instances)
    for i in range(instances):
        A, m, D = random_quadratic_instance(np.random.default_rng([seed, i]))
        est = estimator(A, GaussianFieldMeasure(m, D), samples, [seed, i, 1])
        z[i] = est.z_score(closed(A, m, D))
    within = int(np.sum(z <= band))
    required = int(np.ceil(quota * instances))
    return CheckResult(name, within >= required, float(z.max()), band,
                       {"instances": instances, "samples": samples,
                        "within_band": within, "required": required})


def check_quadratic_mean(seed: int = 0, instances: int = 100, samples: int = 100_000) -> CheckResult:
    """Monte Carlo mean of ``1/2 x^T A x`` within 3 standard errors of the closed form."""
    return _mc_check("quadratic_mean_mc", mc_quadratic_mean, quadratic_mean_closed,
                     seed, instances, samples)


def check_quadratic_second_moment(seed: int = 0, instances: int = 100,
                                  samples: int = 200_000) -> CheckResult:
    return _mc_check("quadratic_second_moment_mc", mc_quadratic_second_moment,
                     quadratic_second_moment_closed, seed, instances, samples)


def gradient_fixture(seed: int = 0, interior: int = 16, observations: int = 8, sigma: float = 0.05):
    """1-D problem with a random source and data from a perturbed truth.

    Returns ``(state, setup, L, G)`` with data attached.
    """
    rng = np.random.default_rng([seed, 7])
    mesh = build_mesh(1, [0.0, 1.0], interior + 2)
    L = build_laplacian(mesh)
    G = green_operator(L)
    q = rng.standard_normal(mesh.interior_count)
    truth = G.entries @ (q + rng.standard_normal(mesh.interior_count))
    setup = build_measurement(mesh, uniform_design(mesh, observations + 1), sigma**2)
    setup = synthesize_data(setup, truth, [seed, 8])
    return ParameterState(1.0, q), setup, L, G


def _rel(a, b):
    return abs(a - b) / max(abs(b), np.finfo(float).tiny)


def check_gradient_fd(seed: int = 0, tol: float = 1e-6) -> CheckResult:
    """Closed-form beta gradient against the FD derivative of the exact marginal."""
    state, setup, L, G = gradient_fixture(seed)
    errs = {}
    for b in VERIFY_BETAS:
        g = potential_calculus(state.with_beta(b), setup, L, G).grad[0]
        fd = fd_derivative(lambda t: marginal_neg_log_posterior(state.with_beta(t), setup, L, G), b)
        errs[repr(b)] = _rel(g, fd.value)
    worst = max(errs.values())
    return CheckResult("gradient_fd", worst <= tol, worst, tol, {"relative_errors": errs})


def check_hessian_fd(seed: int = 0, tol: float = 1e-5) -> CheckResult:
    """Closed-form beta Hessian against the FD derivative of the closed-form gradient."""
    state, setup, L, G = gradient_fixture(seed)
    errs = {}
    for b in VERIFY_BETAS:
        h = potential_calculus(state.with_beta(b), setup, L, G).hessian[0, 0]
        fd = fd_derivative(lambda t: potential_calculus(state.with_beta(t), setup, L, G).grad[0], b)
        errs[repr(b)] = _rel(h, fd.value)
    worst = max(errs.values())
    return CheckResult("hessian_fd", worst <= tol, worst, tol, {"relative_errors": errs})


def check_partition_derivative(tol: float = 1e-8, sizes=(4, 16, 64),
                               betas=(0.1, 1.0, 10.0)) -> CheckResult:
    """``-d log Z / d beta`` by finite differences against ``n / (2 beta)``."""
    errs = {}
    for n in sizes:
        L = build_laplacian(build_mesh(1, [0.0, 1.0], n + 2))
        for b in betas:
            fd = fd_derivative(lambda t: log_partition(L, t), b)
            errs[f"n={n},beta={b!r}"] = _rel(-fd.value, prior_expected_energy(b, n))
    worst = max(errs.values())
    return CheckResult("partition_derivative", worst <= tol, worst, tol, {"relative_errors": errs})


def run_verification(seed: int = 0, instances: int = 100) -> dict:
    """Run every check; the report is a plain dict ready for JSON."""
    results = [
        check_quadratic_mean(seed, instances),
        check_quadratic_second_moment(seed, instances),
        check_gradient_fd(seed),
        check_hessian_fd(seed),
        check_partition_derivative(),
    ]
    return {
        "seed": seed,
        "status": "pass" if all(r.passed for r in results) else "fail",
        "checks": {r.name: r.to_dict() for r in results},
    }
