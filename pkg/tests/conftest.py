import numpy as np
import pytest
from hypothesis import settings

# numba compiles on first use; a per-example deadline would count that.
settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


# one summary line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Call with (passed, detail); prints and records one PASS/FAIL line."""

    def record(passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {request.node.name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with request.config.pluginmanager.get_plugin("capturemanager").global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
