import numpy as np
import pytest

from voxcodec.transforms import PROFILES, ModelParameters


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    """Randomly initialized tiny-profile model (64-bit)."""
    return ModelParameters.initialize(PROFILES["tiny"], seed=0)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def report():
    """Record one acceptance line and assert on it."""

    def _report(tag, ok, detail):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {tag}: {detail}")
        assert ok, f"criterion {tag}: {detail}"

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
