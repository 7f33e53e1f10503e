import numpy as np
import pytest

from qstrat.dir_min import minimize
from qstrat.qfield import Grid, make_branch_field, restrict_to_ball


@pytest.fixture(scope="session")
def grid129():
    return Grid.square(1.0, 129)


@pytest.fixture(scope="session")
def grid65():
    return Grid.square(1.0, 65)


@pytest.fixture(scope="session")
def branch129(grid129):
    return make_branch_field(2, 1, 1.0, grid129)


@pytest.fixture(scope="session")
def branch65(grid65):
    return make_branch_field(2, 1, 1.0, grid65)


@pytest.fixture(scope="session")
def solved65(branch65):
    """Solver output for the square-root trace on the unit circle, 65 x 65 grid."""
    return minimize(restrict_to_ball(branch65, np.zeros(2), 1.0))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(RESULTS):
        ok, detail = RESULTS[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
