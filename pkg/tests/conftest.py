import numpy as np
import pytest

from xraysep.synthetic import SyntheticSpec, make_pair


@pytest.fixture(scope="session")
def tiny_pair():
    """32x32 synthetic pair; small enough for many short training runs."""
    return make_pair(SyntheticSpec("texture-pair", seed=0, size=32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def record_criterion():
    """Store one pass/fail line per acceptance criterion for the terminal summary."""
    def record(number: int, passed: bool, detail: str) -> bool:
        CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(CRITERIA[number])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
