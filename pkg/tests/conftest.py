import pytest
from hypothesis import HealthCheck, settings

from satqkd.io_config import SystemConfig
from satqkd.optimize import OptimizationSpec

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

REFERENCE_FIXED = {"p_x_b": 0.84, "mu1": 0.71, "mu2": 0.14}


@pytest.fixture(scope="session")
def system_d():
    """Reference system with {QBER_I, p_ec} = {0.5%, 1e-7}."""
    return SystemConfig().with_source(intrinsic_qber=0.005, extraneous_count_prob=1e-7)


@pytest.fixture(scope="session")
def quick_spec():
    return OptimizationSpec(restarts=2, grid_points=12)


@pytest.fixture(scope="session")
def fixed_spec():
    return OptimizationSpec(fixed=dict(REFERENCE_FIXED), restarts=2, grid_points=12)


_ACCEPTANCE_LINES: list[str] = []


def record_criterion(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
