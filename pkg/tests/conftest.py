import numpy as np
import pytest

from speechswin.model import ModelConfig

REDUCED = dict(f=8, d=16, N=2, t=2, e=8, depths=(2, 2), heads=(2, 4), k=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def reduced_cfg():
    return ModelConfig(**REDUCED)


def central_difference(fn, arrays, step=1e-5):
    """Numerical gradient of scalar ``fn()`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn()
            flat[i] = orig - step
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def grad_error(analytic, numeric):
    """Elementwise min(relative, absolute) error, maximized."""
    diff = np.abs(analytic - numeric)
    rel = diff / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-300)
    return float(np.max(np.minimum(rel, diff))) if diff.size else 0.0


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
