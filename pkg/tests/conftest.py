import numpy as np
import pytest

from d2v import numerics as nx


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def wide(a, grad=True):
    return nx.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for the acceptance summary printed at session end."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(number: int, ok: bool, detail: str):
        lines.append((number, f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
