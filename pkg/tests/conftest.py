import numpy as np
import pytest

from drivernet import tensor as T
from drivernet.config import miniature
from drivernet.feature import FeatureStreams


def random_streams(rng, b=2, n=4):
    return FeatureStreams(
        rng.normal(size=(b, n, 3)),
        rng.normal(size=(b, n, 34)),
        rng.normal(size=(b, n, 8)),
        normalized=True,
    )


def random_clips(rng, b=2, v=3, n=4, size=8):
    return rng.normal(size=(b, v, n, 3, size, size))


@pytest.fixture
def mini():
    return miniature()


@pytest.fixture
def mini_inputs():
    rng = np.random.default_rng(123)
    return random_clips(rng), random_streams(rng)


@pytest.fixture(autouse=True)
def fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


# acceptance verdicts, filled by test_acceptance.py and printed once at the end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:>2}: NOT RUN")
