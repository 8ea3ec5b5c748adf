import numpy as np
import pytest

from smallnoise.drifts import Cubic1D, DoubleWell1D, Linear, Lorenz63


@pytest.fixture
def dw():
    return DoubleWell1D()


@pytest.fixture
def cubic():
    return Cubic1D()


def ou(rate=1.0):
    """Scalar f(u) = -rate * u."""
    return Linear([[-rate]])


def all_catalog():
    return [
        Linear([[-1.0, 0.5], [0.0, -2.0]], [0.1, 0.0]),
        DoubleWell1D(),
        Cubic1D(),
        Lorenz63(),
    ]


def start_for(model):
    return {1: np.array([0.5]), 2: np.array([1.0, -1.0]), 3: np.array([1.0, 1.0, 20.0])}[model.dim]


ACCEPTANCE = {}


def record(criterion, ok, detail):
    """Store one acceptance outcome; printed at the end of the session."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
