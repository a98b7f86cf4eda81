import numpy as np
import pytest

from cascadeopf import fpacopf
from cascadeopf.netmodel import load_case

# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, name, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def case9():
    return load_case("case9")


@pytest.fixture(scope="session")
def case30():
    return load_case("case30")


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")


@pytest.fixture(scope="session")
def acopf9(case9):
    return fpacopf.solve_acopf(case9)


@pytest.fixture(scope="session")
def acopf30(case30):
    return fpacopf.solve_acopf(case30)


@pytest.fixture(scope="session")
def acopf118(case118):
    return fpacopf.solve_acopf(case118)


@pytest.fixture(scope="session")
def ladder118(case118, acopf118):
    """FP-ACOPF solutions on the 118-bus case for the three rate limits, each started from N-0."""
    return {lim: fpacopf.solve_fpacopf(case118, lim, initial=acopf118) for lim in (1e-9, 1e-12, 1e-15)}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
