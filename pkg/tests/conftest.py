import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def brute_knn(points, q, k):
    """O(n) scan: k nearest to point q, self excluded, ties by index."""
    d = ((points - points[q]) ** 2).sum(axis=1)
    order = sorted((float(d[i]), i) for i in range(len(points)) if i != q)
    return [i for _, i in order[:k]]


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((number, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
