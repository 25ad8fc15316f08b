import numpy as np
import pytest

from ksnslide.flow import accumulate, d8_flow
from ksnslide.simulate import steady_state_dem

ACCEPTANCE_RESULTS: dict = {}


@pytest.fixture(scope="session")
def fluvial():
    """A 60x60 steady-state landscape (ksn = 100, theta = 0.5) and its routing."""
    dem = steady_state_dem(60, 60, 30.0, 100.0, 0.5, seed=7)
    ff = d8_flow(dem)
    return dem, ff, accumulate(ff)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
