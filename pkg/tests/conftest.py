import numpy as np
import pytest

from gludyn import data, physio

# One-line verdicts collected by the acceptance suite and echoed in the
# terminal summary so they are visible even with output capture on.
acceptance_verdicts: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_verdicts:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_verdicts:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def params() -> physio.StaticParams:
    return physio.default_params()


@pytest.fixture(scope="session")
def short_series():
    series, truth = data.synthesize(days=2, seed=11)
    return series, truth


@pytest.fixture(scope="session")
def steady(params):
    return physio.steady_state(params, target_glucose=120.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
