import numpy as np
import pytest

from fpxkit.codec import FpxFormat

ALL_FORMATS = [FpxFormat.parse(n) for n in ("e3m2", "e2m3", "e2m2", "e3m1", "e2m1", "e4m3", "e5m2", "e1m1", "e1m2")]


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
