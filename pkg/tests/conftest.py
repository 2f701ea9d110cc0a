import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ppdelab import TimeGrid, simulate_base
from ppdelab.library import identity_sigma

settings.register_profile(
    "ppdelab",
    max_examples=30,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("ppdelab")


@pytest.fixture(scope="session")
def sigma1():
    return identity_sigma()


@pytest.fixture(scope="session")
def grid100():
    return TimeGrid(1.0, 100)


@pytest.fixture(scope="session")
def base_small(sigma1):
    """Brownian ensemble for quick statistical checks: N=20000, n=20."""
    return simulate_base(sigma1, TimeGrid(1.0, 20), 20_000, 1, seed=7)


@pytest.fixture(scope="session")
def base_1e5(sigma1):
    """N=1e5, n=50 Brownian ensemble shared by the regression/BSDE tests."""
    return simulate_base(sigma1, TimeGrid(1.0, 50), 100_000, 1, seed=11)


def within(value, target, k, se):
    return abs(value - target) <= k * se


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_log.lines():
        terminalreporter.write_line(line)
