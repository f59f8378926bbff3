import numpy as np
import pytest

from bingham_dg.forms import Discretization
from bingham_dg.mesh import generate_structured_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def disc2():
    return Discretization(generate_structured_mesh(1, 1))


@pytest.fixture(scope="session")
def disc4():
    return Discretization(generate_structured_mesh(4, 4))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":abcd"))):
            terminalreporter.write_line(line)
