import numpy as np
import pytest

from coopbnn import nn


def central_differences(f, x, h=1e-4):
    """Gradient of scalar ``f`` at ``x`` by central differences, coordinate by coordinate."""
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def max_relative_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mve():
    return nn.mve_spec(2, hidden=(4, 3))


def pytest_configure(config):
    config._criteria = []


@pytest.fixture
def record_criterion(request):
    """Log ``CRITERION n PASS/FAIL detail`` for the terminal summary."""
    def record(n, passed, detail):
        request.config._criteria.append((n, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = sorted(getattr(config, "_criteria", []), key=lambda t: t[0])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, passed, detail in lines:
        terminalreporter.write_line(f"CRITERION {n:>2} {'PASS' if passed else 'FAIL'}  {detail}")
