import numpy as np
import pytest
from hypothesis import settings

from sen import tensor as T

settings.register_profile("desk", max_examples=40, deadline=None)
settings.load_profile("desk")


def fd_max_rel_err(loss_fn, params, eps=1e-5):
    """Independent central-difference oracle: max |analytic - fd| / (|fd| + 1e-8)."""
    for p in params:
        p.grad = None
    T.backward(loss_fn())
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()
        for j in range(p.size):
            keep = flat[j]
            flat[j] = keep + eps
            up = loss_fn().item()
            flat[j] = keep - eps
            down = loss_fn().item()
            flat[j] = keep
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(analytic[j] - fd) / (abs(fd) + 1e-8))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[CRITERIA] = []


@pytest.fixture
def criterion(pytestconfig):
    """``criterion(n, ok, detail)`` records and prints one acceptance verdict line."""
    def report(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        pytestconfig.stash[CRITERIA].append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
