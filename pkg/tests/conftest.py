import numpy as np
import pytest

from fedbss.data import Dataset

from oracles import ACCEPTANCE_RESULTS


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture
def blobs():
    """Small, easy 3-class dataset in 4 dimensions."""
    rng = np.random.default_rng(7)
    means = np.array([[3, 0, 0, 0], [0, 3, 0, 0], [0, 0, 3, 0]], dtype=float)
    y = np.repeat(np.arange(3), 20)
    x = means[y] + 0.5 * rng.normal(size=(60, 4))
    return Dataset(x, y, 3)
