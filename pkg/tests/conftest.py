import numpy as np
import pytest
from hypothesis import strategies as st

from sieverates.densities import Grid, GridDensity, normalize

UNIT2 = Grid(0.0, 1.0, 2)
UNIT4 = Grid(0.0, 1.0, 4)


def density(*mass, grid=None):
    grid = grid or Grid(0.0, 1.0, len(mass))
    return GridDensity(grid, np.array(mass, dtype=float))


@st.composite
def mass_vectors(draw, bins=None, min_bins=1, max_bins=6, allow_zeros=True):
    b = bins if bins is not None else draw(st.integers(min_bins, max_bins))
    lo = 0.0 if allow_zeros else 1e-3
    raw = draw(st.lists(st.floats(lo, 1.0), min_size=b, max_size=b).filter(lambda v: sum(v) > 1e-6))
    return normalize(raw, Grid(0.0, 1.0, b))


@st.composite
def density_pairs(draw, allow_zeros=True):
    b = draw(st.integers(1, 6))
    return draw(mass_vectors(bins=b, allow_zeros=allow_zeros)), draw(mass_vectors(bins=b, allow_zeros=allow_zeros))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion after the run

_acceptance: dict[str, dict] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[report.nodeid.split("::")[-1]] = {"outcome": report.outcome}


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for number, label, tests in CRITERIA:
        outcomes = [_acceptance.get(t, {}).get("outcome") for t in tests]
        if any(o is None for o in outcomes):
            status = "NOT RUN"
        else:
            status = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        parts = ""
        if len(tests) > 1:
            parts = "  (" + ", ".join(f"{t.removeprefix('test_')}: {o or 'not run'}" for t, o in zip(tests, outcomes)) + ")"
        terminalreporter.write_line(f"{status:<7} {number:>2}. {label}{parts}")
