import numpy as np
import pytest

from penbsde import problems


@pytest.fixture(scope="session")
def heat():
    return problems.builtin("neumann-heat-interval")


@pytest.fixture(scope="session")
def affine():
    return problems.builtin("affine-flux-interval")


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
