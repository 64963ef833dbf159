import numpy as np
import pytest

from simulmt import tensor as T

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def f64():
    """Run the test body in 64-bit mode."""
    with T.precision(64):
        yield


@pytest.fixture(autouse=True)
def _reset_modes():
    T.set_training(True)
    T.seed_dropout(0)
    yield
    T.set_training(True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (f(up) - f(down)) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
