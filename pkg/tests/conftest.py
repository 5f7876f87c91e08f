import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from panscan.numerics import Tensor

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(rng, *shape, lo=-2.0, hi=2.0, name=None):
    """float64 leaf with uniform entries, the standard gradient-check input."""
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, name=name)


# one verdict line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
