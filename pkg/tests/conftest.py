import numpy as np
import pytest

from evofam.operator_spec import heat_spec, noncommuting_example


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


@pytest.fixture
def heat():
    return heat_spec(d=1)


@pytest.fixture
def example():
    return noncommuting_example()


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
