import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sdda import autodiff as ad

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def record_criterion(request):
    """Log one PASS/FAIL line for an acceptance criterion and return the flag."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
