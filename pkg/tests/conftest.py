import numpy as np
import pytest

from densessl import kernels

# populated by test_acceptance.py: (number, description, "PASS" | "FAIL")
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, desc, status in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {num} ({desc}): {status}")


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    kernels.warmup()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_box(rng, lo=0.0, hi=64.0, min_side=0.5):
    while True:
        xs = np.sort(rng.uniform(lo, hi, size=2))
        ys = np.sort(rng.uniform(lo, hi, size=2))
        if xs[1] - xs[0] >= min_side and ys[1] - ys[0] >= min_side:
            return np.array([xs[0], ys[0], xs[1], ys[1]])
