"""Shared pytest hooks: the acceptance suite reports one verdict line per criterion."""

from __future__ import annotations

import pytest

_VERDICTS: dict[int, str] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.checks: list[tuple[str, bool]] = []
        self.notes: list[str] = []

    def check(self, label: str, ok: bool) -> bool:
        self.checks.append((label, bool(ok)))
        return bool(ok)

    def note(self, text: str) -> None:
        """Context shown with the verdict but not part of it."""
        self.notes.append(text)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(ok for _, ok in self.checks)

    def line(self) -> str:
        detail = "; ".join(f"{label} [{'ok' if ok else 'FAIL'}]" for label, ok in self.checks)
        line = f"criterion {self.number} {'PASS' if self.passed else 'FAIL'}: {self.title}: {detail}"
        return line + "".join(f"\n    note: {n}" for n in self.notes)


@pytest.fixture
def criterion(request):
    """Collect labelled checks for one acceptance criterion and record the verdict."""
    holder: list[Criterion] = []

    def make(number: int, title: str) -> Criterion:
        c = Criterion(number, title)
        holder.append(c)
        return c

    yield make
    report = getattr(request.node, "rep_call", None)
    for c in holder:
        if report is None or report.failed and c.passed:
            c.check("did not run to completion", False)
        _VERDICTS[c.number] = c.line()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[n])
