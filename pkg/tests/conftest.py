import numpy as np
import pytest

from bespoke_ode.flow_fields import (
    affine_standard_field,
    circle_mixture,
    gmm_marginal_field,
)
from bespoke_ode.ode_solvers import solve_adaptive_batch
from bespoke_ode.schedulers import make_ot_scheduler


@pytest.fixture(scope="session")
def mixture():
    return circle_mixture(5, 3.0, 0.09, dim=2)


@pytest.fixture(scope="session")
def gmm_field(mixture):
    return gmm_marginal_field(make_ot_scheduler(), mixture)


@pytest.fixture(scope="session")
def affine_field():
    return affine_standard_field()


@pytest.fixture(scope="session")
def gmm_paths(gmm_field):
    # small shared reference batch; solved once per session
    rng = np.random.default_rng(np.random.SeedSequence(0, spawn_key=(3,)))
    x0 = rng.standard_normal((8, 2))
    return solve_adaptive_batch(gmm_field, x0, rtol=1e-9, atol=1e-9)


@pytest.fixture(scope="session")
def affine_paths(affine_field):
    rng = np.random.default_rng(np.random.SeedSequence(0, spawn_key=(3,)))
    x0 = rng.standard_normal((8, 2))
    return solve_adaptive_batch(affine_field, x0, rtol=1e-9, atol=1e-9)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None) if mod else None
    if not lines:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
