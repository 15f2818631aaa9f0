import numpy as np
import pytest

from fedrecsim.data import generate_synthetic


def central_difference(f, x, step=1e-4):
    """Numerical gradient of scalar ``f`` at array ``x`` (copied, not mutated)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = f(x)
        x[idx] = orig - step
        lo = f(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
    return grad


def relative_error(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(40, 30, 3, 12, seed=3)


@pytest.fixture(scope="session")
def synthetic_dataset():
    return generate_synthetic(200, 100, 5, 30, seed=7)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
