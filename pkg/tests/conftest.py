"""Shared pytest hooks.

Acceptance tests call the ``acceptance`` fixture to record one verdict line
per criterion; the lines are printed in the terminal summary so they appear
in plain ``pytest -v`` output regardless of capture settings.
"""

import pytest

_VERDICTS = {}


@pytest.fixture
def acceptance():
    def record(number: int, title: str, passed: bool, detail: str = ""):
        status = "PASS" if passed else "FAIL"
        _VERDICTS[number] = f"criterion {number} [{status}] {title}" + (f": {detail}" if detail else "")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])
