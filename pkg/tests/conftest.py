"""Collects one verdict line per acceptance criterion and prints them after the run."""

from __future__ import annotations

import pytest

_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    def record(code: str, passed: bool, detail: str) -> None:
        line = f"{code} {'PASS' if passed else 'FAIL'}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
