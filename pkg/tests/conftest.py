import numpy as np
import pytest

from stmix.model import GroupedPanel, IncomeClasses

# Filled by test_acceptance; printed once at the end of the session.
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def make_panel(counts, bounds, x=None, M=None, area_ids=None):
    """Small panel from ``(m, T, G)`` counts and one boundary vector for all periods."""
    counts = np.asarray(counts, dtype=np.int64)
    m, T, _ = counts.shape
    M = m if M is None else M
    if x is None:
        x = np.ones((M, T, 1))
    ids = area_ids or [str(i + 1) for i in range(M)]
    return GroupedPanel(ids, m, [str(t + 1) for t in range(T)], IncomeClasses([bounds] * T), counts, x)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
