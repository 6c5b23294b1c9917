import numpy as np
import pytest

from helpers import ACCEPTANCE_LINES
from pemix.spectral import GridSpec


@pytest.fixture(scope="session")
def g():
    return GridSpec()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
