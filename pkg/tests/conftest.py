import numpy as np
import pytest

from quantpk.model import FixedEffects
from quantpk.ode import SolveSettings, Solver

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def theta():
    return FixedEffects()


@pytest.fixture
def solver():
    return Solver(SolveSettings())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
