import numpy as np
import pytest

from nmpclab import ExtendedState, PvtolParams, Scenario, pvtol_cost, pvtol_model


@pytest.fixture(scope="session")
def pvtol():
    return pvtol_model(PvtolParams())


@pytest.fixture
def make_cost():
    def make(d=0.2, variant="full", gamma=1000.0, **params):
        return pvtol_cost(Scenario(d), variant, gamma, PvtolParams(**params))

    return make


@pytest.fixture
def reference_pair():
    d = 0.2
    return ExtendedState(np.array([d, d, 0.0, 0.0, 0.0, 0.0]), np.array([1.0, 0.0]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
