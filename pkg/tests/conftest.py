import numpy as np
import pytest

from lasp.fixtures import SplitMix64

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def qkv():
    """N=64, d_h=8 problem drawn from the seeded fixture stream."""
    gen = SplitMix64(7)
    return tuple(gen.uniform((64, 8)) for _ in range(4))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
