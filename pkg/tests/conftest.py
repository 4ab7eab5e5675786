import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class Pairs:
    """Bare dataset stand-in: paired branch and trunk inputs (and labels)."""

    def __init__(self, x_B, x_T, y=None):
        self.x_B = np.asarray(x_B, dtype=float)
        self.x_T = np.asarray(x_T, dtype=float)
        self.y = None if y is None else np.asarray(y, dtype=float)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
