import numpy as np
import pytest

from odegrad.autodiff import VectorField, mlp_field


def central_diff(fn, x, h=1e-5):
    """Central-difference gradient of scalar ``fn`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        out[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return out


def rel_inf(got, want, floor=1e-8):
    got, want = np.asarray(got), np.asarray(want)
    return float(np.abs(got - want).max() / max(np.abs(want).max(), floor))


@pytest.fixture
def mlp():
    return mlp_field(3, 5, seed=7)


@pytest.fixture
def squash_field():
    return VectorField([("concatsquash", 6), ("softplus",), ("concatsquash", 3)], 3, seed=3)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
