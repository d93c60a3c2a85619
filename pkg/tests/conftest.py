import os

import pytest
from hypothesis import HealthCheck, settings

from quenched_lsv.base import ParameterProcess, make_base
from quenched_lsv.grid import make_grid
from quenched_lsv.transfer import OperatorCache

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def grid512():
    return make_grid(512, 3)


@pytest.fixture(scope="session")
def grid1024():
    return make_grid(1024, 3)


@pytest.fixture(scope="session")
def rotation():
    return make_base("rotation")


@pytest.fixture(scope="session")
def mild_params():
    return ParameterProcess("0.2+0.05*sin(2*pi*w)", "1", 0.1, 0.3, 0.05)


@pytest.fixture(scope="session")
def op_cache():
    return OperatorCache(4096)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
