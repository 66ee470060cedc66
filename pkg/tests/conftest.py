import numpy as np
import pytest

from ifttrust import (
    ParameterState,
    build_laplacian,
    build_measurement,
    build_mesh,
    green_operator,
    uniform_design,
)
from ifttrust.trust import synthesize_data

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion id")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        number, title = mark.args
        status = "PASS" if rep.outcome == "passed" else "FAIL"
        # a criterion covered by several tests fails if any of them fails
        if _CRITERIA.get(number, ("PASS",))[0] == "FAIL":
            status = "FAIL"
        _CRITERIA[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title}")


class Problem1D:
    """Small 1-D Poisson problem with synthetic data from a perturbed truth."""

    def __init__(self, interior=16, density=9, sigma=0.05, seed=0):
        rng = np.random.default_rng(seed)
        self.mesh = build_mesh(1, [0.0, 1.0], interior + 2)
        self.L = build_laplacian(self.mesh)
        self.G = green_operator(self.L)
        self.q = rng.standard_normal(self.mesh.interior_count)
        self.phi_star = self.G.entries @ (self.q + rng.standard_normal(self.mesh.interior_count))
        setup = build_measurement(self.mesh, uniform_design(self.mesh, density), sigma**2)
        self.setup = synthesize_data(setup, self.phi_star, seed + 1)
        self.state = ParameterState(1.0, self.q)


@pytest.fixture
def small_problem():
    return Problem1D()


@pytest.fixture
def tiny_problem():
    return Problem1D(interior=6, density=4, sigma=0.1, seed=3)
