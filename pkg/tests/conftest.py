import numpy as np
import pytest

from fbverify import Grid, ValueField, builtin, solve_hjb, synthesize_policy

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def lq():
    return builtin("lq1d")


@pytest.fixture(scope="session")
def kink():
    return builtin("kink1d")


@pytest.fixture(scope="session")
def martingale():
    return builtin("martingale1d")


@pytest.fixture(scope="session")
def lq_grid(lq):
    return Grid.for_problem(lq, -4.0, 4.0, 161)


@pytest.fixture(scope="session")
def lq_field(lq, lq_grid):
    return solve_hjb(lq, lq_grid)


@pytest.fixture(scope="session")
def lq_policy(lq, lq_grid, lq_field):
    return synthesize_policy(lq, lq_grid, lq_field)


@pytest.fixture(scope="session")
def lq_exact_field(lq, lq_grid):
    return ValueField.from_function(lq_grid, lq.value)


@pytest.fixture(scope="session")
def kink_grid(kink):
    return Grid.for_problem(kink, -4.0, 4.0, 161)


@pytest.fixture(scope="session")
def kink_field(kink, kink_grid):
    return solve_hjb(kink, kink_grid)


@pytest.fixture(scope="session")
def kink_exact_field(kink, kink_grid):
    return ValueField.from_function(kink_grid, kink.value)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
