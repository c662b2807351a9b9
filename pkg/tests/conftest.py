import pytest

from psqueue.model import BatchArrivalSpec, QueueModel, ServiceSpec
from psqueue.policies import eps_kernel


@pytest.fixture
def eps_model():
    """Unit batches, uniform service on [0, 2], rate 0.4 (rho = 0.4)."""
    return QueueModel(BatchArrivalSpec(0.4, (0.0, 1.0)), ServiceSpec.uniform(0.0, 2.0), eps_kernel())


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def report(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
