"""Shared, session-cached fixtures for the expensive default-parameter objects."""
import numpy as np
import pytest

from rtipping.model import ModelParams

ACCEPTANCE_LINES = []


def record(criterion: int, ok: bool, detail: str):
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def params():
    return ModelParams()


@pytest.fixture(scope="session")
def stable(params):
    from rtipping.pulses import compute_pulse
    return compute_pulse("stable", params)


@pytest.fixture(scope="session")
def unstable(params):
    from rtipping.pulses import compute_pulse
    return compute_pulse("unstable", params)


@pytest.fixture(scope="session")
def trivial(params):
    from rtipping.pulses import compute_pulse
    return compute_pulse("trivial", params)


@pytest.fixture(scope="session")
def setup(params):
    from rtipping.pullback import prepare
    return prepare(params)


@pytest.fixture(scope="session")
def bisection(setup):
    """Bisection for r_c at a = 15.65 from [0.5, 2.0] to width 1e-4."""
    from rtipping.critical import bisect_rc
    return bisect_rc(setup, 0.5, 2.0, tol_r=1e-4)


@pytest.fixture(scope="session")
def heteroclinic(setup, bisection):
    from rtipping.critical import refine_from_bisection
    return refine_from_bisection(setup, bisection)


@pytest.fixture(scope="session")
def transversal(setup, heteroclinic):
    from rtipping.critical import transversality
    return transversality(heteroclinic, setup)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion number")
