import numpy as np
import pytest

from kcfattack.harness.config import ExperimentConfig
from kcfattack.harness.experiment import prepare

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def hexagon():
    """Default generated hexagon instance, calibrated."""
    return prepare(ExperimentConfig())


@pytest.fixture(scope="session")
def line():
    return prepare(ExperimentConfig(topology="line"))


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
