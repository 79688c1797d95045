from __future__ import annotations

import time

import pytest

_RESULTS = pytest.StashKey[dict]()


class Criterion:
    """Times one acceptance criterion and records a PASS/FAIL line.

    An exception inside the block, a failed check or an exceeded time
    budget all count as FAIL; the test then fails too.
    """

    def __init__(self, store: dict, number: int, title: str, budget_s: float | None):
        self.store, self.number, self.title, self.budget = store, number, title, budget_s
        self.checks: list[tuple[bool, str]] = []

    def check(self, ok: bool, detail: str) -> None:
        self.checks.append((bool(ok), detail))

    def __enter__(self) -> "Criterion":
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        if exc is not None:
            self.checks.append((False, f"raised {exc_type.__name__}: {exc}"))
        if self.budget is not None:
            self.checks.append((elapsed < self.budget, f"{elapsed:.1f}s of {self.budget:.0f}s budget"))
        ok = bool(self.checks) and all(c for c, _ in self.checks)
        detail = "; ".join(d for _, d in self.checks)
        self.store[self.number] = f"criterion {self.number:>2} {'PASS' if ok else 'FAIL'}  {self.title}: {detail}"
        if exc is None and not ok:
            failed = "; ".join(d for c, d in self.checks if not c)
            raise AssertionError(f"criterion {self.number} failed: {failed}")
        return False


@pytest.fixture
def criterion(request):
    store = request.config.stash.setdefault(_RESULTS, {})

    def make(number: int, title: str, budget_s: float | None = None) -> Criterion:
        return Criterion(store, number, title, budget_s)

    return make


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_RESULTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        terminalreporter.write_line(store[number])
