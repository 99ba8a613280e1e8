import os

import numpy as np
import pytest

from spx.funcalc import canonical_problem, constant_problem


def seed():
    return int(os.environ.get("SPX_SEED", "20240607"))


@pytest.fixture
def rng():
    return np.random.default_rng(seed())


@pytest.fixture
def canonical():
    return canonical_problem


@pytest.fixture
def constant():
    return constant_problem


CRITERIA = []


def report(line):
    """Record a criterion verdict; echoed in the terminal summary."""
    CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
