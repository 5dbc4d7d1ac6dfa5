import numpy as np
import pytest

from edgecap import pipeline

# one "criterion N: PASS/FAIL ..." line per acceptance criterion, echoed in the summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def sweep_cache(tmp_path_factory):
    """Fresh per-session solve cache shared by the BEM-backed tests."""
    return tmp_path_factory.mktemp("edgecap-cache")


@pytest.fixture(scope="session")
def desk_curves(sweep_cache):
    """Desk-tier curves of the four table configurations, keyed like the tables."""
    curves, _ = pipeline.table_curves("desk", cache=sweep_cache)
    return curves


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
