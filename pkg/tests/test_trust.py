import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifttrust import (
    ParameterState,
    build_laplacian,
    build_measurement,
    build_mesh,
    green_operator,
    limit_trust,
    model_error_sweep,
    potential_calculus,
    prior_expected_energy,
    second_derivative_at_optimum,
    solve_trust,
    uniform_design,
)
from ifttrust.calculus import centered_posterior
from ifttrust.free_theory import BetaPrior
from ifttrust.mesh import MeasurementSetup
from ifttrust.trust import TrustSolveError, convergence_study, synthesize_data


class Mismatch:
    """1-D sine-source problem whose truth carries a parabolic model error."""

    def __init__(self, nodes=34, density=128, sigma=1e-3, scale=1.0, seed=0):
        self.mesh = build_mesh(1, [0.0, 1.0], nodes)
        self.L = build_laplacian(self.mesh)
        self.G = green_operator(self.L)
        self.q = self.mesh.evaluate(lambda x: np.pi**2 * np.sin(np.pi * x))
        self.base = self.G.entries @ self.q
        self.psi0 = self.G.entries @ self.mesh.evaluate(lambda x: 40 * x * (1 - x))
        self.psi_star = scale * self.psi0
        self.empty = build_measurement(self.mesh, uniform_design(self.mesh, density), sigma**2)
        self.setup = synthesize_data(self.empty, self.base + self.psi_star, seed)


_MISMATCH = Mismatch()


@pytest.fixture
def mismatch():
    return _MISMATCH


def test_mismatch_trust_is_finite_and_stationary(mismatch):
    p = mismatch
    rep = solve_trust(p.setup, p.L, p.G, p.q, psi_star=p.psi_star)
    assert not rep.diverged and math.isfinite(rep.beta_hat)
    assert rep.method == "fixed_point"
    assert rep.grad_residual <= 1e-8
    assert rep.verdict == "weakly_well_posed"
    assert rep.informativeness_margin > 0
    assert rep.beta_hat == pytest.approx(rep.limit_beta, rel=0.05)


def test_fixed_point_balance_at_solution(mismatch):
    # at the optimum: n/beta = m^T A m + tr(A S~)
    p = mismatch
    rep = solve_trust(p.setup, p.L, p.G, p.q)
    post = centered_posterior(ParameterState(rep.beta_hat, p.q), p.setup, p.L, p.G)
    A = p.L.form()
    rhs = post.mean @ A @ post.mean + np.sum(A * post.covariance)
    assert p.L.n / rep.beta_hat == pytest.approx(rhs, rel=1e-8)


def test_bisection_fallback_agrees_with_fixed_point(mismatch):
    p = mismatch
    fp = solve_trust(p.setup, p.L, p.G, p.q)
    bis = solve_trust(p.setup, p.L, p.G, p.q, max_iter=1)
    assert bis.method == "bisection"
    assert bis.beta_hat == pytest.approx(fp.beta_hat, rel=1e-7)


def test_trace_is_recorded(mismatch):
    p = mismatch
    rep = solve_trust(p.setup, p.L, p.G, p.q)
    assert len(rep.beta_trace) == rep.iterations
    assert rep.beta_trace[-1] == pytest.approx(rep.beta_hat, rel=1e-12)


def test_correct_model_diverges():
    p = Mismatch(density=64, sigma=1e-4, scale=0.0, seed=1)
    rep = solve_trust(p.setup, p.L, p.G, p.q, psi_star=p.psi_star)
    assert rep.diverged and rep.beta_hat == math.inf
    assert rep.limit_beta == math.inf
    assert rep.to_dict()["beta_hat"] == "inf"


def test_correct_model_noise_free_limit_diverges():
    for seed in range(3):
        p = Mismatch(density=64, sigma=1e-8, scale=0.0, seed=seed)
        assert solve_trust(p.setup, p.L, p.G, p.q).diverged


def test_input_validation(mismatch):
    p = mismatch
    with pytest.raises(ValueError):
        solve_trust(p.setup, p.L, p.G, p.q, prior_kind="gaussian")
    with pytest.raises(ValueError):
        solve_trust(p.setup, p.L, p.G, p.q, damping=0.0)
    empty = MeasurementSetup(np.zeros((0, 1)), np.zeros((0, p.L.n)), 1.0, np.zeros(0))
    with pytest.raises(ValueError, match="observation"):
        solve_trust(empty, p.L, p.G, p.q)


def test_jeffreys_needs_three_dimensions():
    mesh = build_mesh(1, [0, 1], 4)
    L = build_laplacian(mesh)
    G = green_operator(L)
    setup = build_measurement(mesh, mesh.interior_coordinates, 1e-2, data=np.ones(2))
    with pytest.raises(ValueError, match="Jeffreys"):
        solve_trust(setup, L, G, np.ones(2), "jeffreys")
    with pytest.raises(ValueError):
        limit_trust(np.ones(2), L, prior_kind="jeffreys")


def test_nonconvergent_without_bracket_raises(mismatch, monkeypatch):
    # a gradient of one sign on the whole bracket leaves nothing to fall back to
    import ifttrust.trust as trust

    p = mismatch
    monkeypatch.setattr(trust, "_grad", lambda *a: 1.0)
    with pytest.raises(TrustSolveError, match="sign"):
        solve_trust(p.setup, p.L, p.G, p.q, max_iter=1)


def test_limit_trust_values(mismatch):
    p = mismatch
    assert limit_trust(np.zeros(p.L.n), p.L) == math.inf
    e = p.psi0 @ p.L.form() @ p.psi0
    assert limit_trust(p.psi0, p.L) == pytest.approx(p.L.n / e, rel=1e-12)
    assert limit_trust(p.psi0, p.L, prior_kind="jeffreys") == pytest.approx((p.L.n - 2) / e, rel=1e-12)
    jef = limit_trust(p.psi0, p.L, prior_kind="jeffreys")
    assert jef == pytest.approx(limit_trust(p.psi0, p.L) * (p.L.n - 2) / p.L.n, rel=1e-12)
    with pytest.raises(ValueError):
        limit_trust(np.ones(3), p.L)
    with pytest.raises(ValueError):
        limit_trust(p.psi0, p.L, prior_kind="other")


@given(st.floats(1e-3, 1e3))
@settings(max_examples=30, deadline=None)
def test_limit_trust_scales_inverse_square(c):
    p = _MISMATCH
    ratio = limit_trust(c * p.psi0, p.L) / limit_trust(p.psi0, p.L)
    assert ratio == pytest.approx(c**-2, rel=1e-10)


def test_limit_trust_grows_with_refinement():
    # a fixed model error on finer meshes spans more dimensions
    limits = []
    for nodes in (10, 19, 37):
        mesh = build_mesh(1, [0, 1], nodes)
        L = build_laplacian(mesh)
        G = green_operator(L)
        psi = G.entries @ mesh.evaluate(lambda x: 40 * x * (1 - x))
        limits.append(limit_trust(psi, L))
    assert limits[0] < limits[1] < limits[2]


def test_second_derivative_closed_form():
    assert second_derivative_at_optimum(2.0, 1) == 0.0
    assert second_derivative_at_optimum(1.0, 3) == 1.0
    assert second_derivative_at_optimum(0.5, 9) == pytest.approx(16.0)
    with pytest.raises(ValueError):
        second_derivative_at_optimum(1.0, 3, "flat")
    for bad in (0.0, -1.0, math.inf, math.nan):
        with pytest.raises(ValueError):
            second_derivative_at_optimum(bad, 3)


def test_jeffreys_hessian_at_optimum_relation(mismatch):
    # stationarity turns the pipeline Hessian into (n - 2)/(2 beta^2) - C_post
    p = mismatch
    rep = solve_trust(p.setup, p.L, p.G, p.q, "jeffreys")
    r = potential_calculus(ParameterState(rep.beta_hat, p.q, BetaPrior("jeffreys")), p.setup, p.L, p.G)
    n, b = p.L.n, rep.beta_hat
    expected = 0.5 * (n - 2) / b**2 - r.posterior_cov
    assert r.hessian[0, 0] == pytest.approx(expected, rel=1e-6)


def test_sweep_ratios_and_monotonicity():
    p = Mismatch(sigma=1e-6)
    rep = model_error_sweep(p.psi0, p.empty, p.L, p.G, p.q, [1.0, 0.5, 0.25, 0.125], seed=0)
    assert rep.valid and rep.monotone and rep.scaling_ok()
    betas = [r.beta_hat for r in rep.rows]
    limits = [r.limit_beta for r in rep.rows]
    assert np.argsort(betas).tolist() == np.argsort(limits).tolist()
    for r in rep.rows:
        assert r.beta_hat == pytest.approx(r.limit_beta, rel=0.05)


def test_sweep_zero_scale_row_diverges():
    p = Mismatch(sigma=1e-6)
    rep = model_error_sweep(p.psi0, p.empty, p.L, p.G, p.q, [1.0, 0.5, 0.0], seed=1)
    last = rep.rows[-1]
    assert last.scale == 0.0 and last.diverged and last.limit_beta == math.inf
    assert len(rep.ratios) == 1 and rep.monotone


def test_synthesize_data_reproducible(mismatch):
    p = mismatch
    a = synthesize_data(p.empty, p.base, 5).data
    b = synthesize_data(p.empty, p.base, 5).data
    c = synthesize_data(p.empty, p.base, 6).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_convergence_study_rejects_bad_designs():
    p = Mismatch(nodes=18)
    with pytest.raises(ValueError, match="empty"):
        convergence_study(p.mesh, p.L, p.G, p.q, p.base + p.psi0, 1e-3, [])
    with pytest.raises(ValueError, match="nested"):
        convergence_study(p.mesh, p.L, p.G, p.q, p.base + p.psi0, 1e-3, [4, 6])
    with pytest.raises(ValueError, match="nested"):
        convergence_study(p.mesh, p.L, p.G, p.q, p.base + p.psi0, 1e-3, [8, 4])


def test_convergence_study_fixed_beta():
    p = Mismatch(nodes=66)
    rep = convergence_study(p.mesh, p.L, p.G, p.q, p.base + p.psi0, 1e-4, [4, 8, 16, 32], beta=5.0)
    h = [r.fill_distance for r in rep.rows]
    assert all(b == pytest.approx(a / 2) for a, b in zip(h, h[1:]))
    assert all(r.beta == 5.0 for r in rep.rows)
    assert rep.cov_decreasing and rep.cov_slope < 0


def test_convergence_study_reports_divergence():
    p = Mismatch(nodes=34)
    with pytest.raises(TrustSolveError, match="diverged"):
        convergence_study(p.mesh, p.L, p.G, p.q, p.base, 1e-8, [8, 16])


def test_prior_expected_energy_normalizes_residual(mismatch):
    p = mismatch
    rep = solve_trust(p.setup, p.L, p.G, p.q)
    g = potential_calculus(ParameterState(rep.beta_hat, p.q), p.setup, p.L, p.G).grad[0]
    assert rep.grad_residual == pytest.approx(abs(g) / prior_expected_energy(rep.beta_hat, p.L.n))


def test_convergence_mean_error_rate_on_fine_mesh():
    p = Mismatch(nodes=130, sigma=1e-4)
    rep = convergence_study(p.mesh, p.L, p.G, p.q, p.base + p.psi0, 1e-4, [8, 16, 32, 64])
    assert rep.mean_decreasing and rep.cov_decreasing
    assert rep.mean_slope <= -1.0 and rep.cov_slope < 0
