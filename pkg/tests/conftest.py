import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from turnpike_lab.grid import Disk, Rectangle, build_grid
from turnpike_lab.optimizer import enumerate_optima

settings.register_profile(
    "lab", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture]
)
settings.load_profile("lab")

ACCEPTANCE_LINES = []


def exact_fp(grid):
    return 1e-12 * grid.area


@pytest.fixture(scope="session")
def square16():
    return build_grid(Rectangle(1.0, 1.0), 16)


@pytest.fixture(scope="session")
def square32():
    return build_grid(Rectangle(1.0, 1.0), 32)


@pytest.fixture(scope="session")
def disk32():
    return build_grid(Disk(1.0), 32)


@pytest.fixture(scope="session")
def disk32_registry(disk32):
    V0 = 0.3 * disk32.area
    return enumerate_optima(disk32, V0, n_starts=4, seed=0, fp_tol=exact_fp(disk32))


@pytest.fixture(scope="session")
def square32_registry(square32):
    V0 = 0.25 * square32.area
    return enumerate_optima(square32, V0, n_starts=4, seed=0, fp_tol=exact_fp(square32))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
