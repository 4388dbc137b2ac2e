import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


@pytest.fixture
def criterion():
    """Record one acceptance line; ``criterion(n, name, ok, detail)``."""
    def record(number, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (int(s.split()[2].rstrip(":").rstrip("ab")),
                                                            s.split()[2])):
            terminalreporter.write_line(line)
