import warnings

import numpy as np
import pytest
from scipy import stats

from wealthfpk.grid import build_grid, project
from wealthfpk.model import ModelParams

ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, passed: bool, detail: str) -> None:
    """Record one acceptance line; printed in the terminal summary."""
    ACCEPTANCE_LINES.append(f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_grid():
    return build_grid(-10.0, 5000.0, 4000, 1000.0)


@pytest.fixture(scope="session")
def unit_params():
    return ModelParams(1.0, 1.0)


@pytest.fixture(scope="session")
def debt_gaussian(default_grid):
    return project(lambda v: stats.norm.pdf(v, 1.0, 1.0), default_grid)


@pytest.fixture(autouse=True)
def _quiet_unnormalized():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="initial density has mass")
        yield
