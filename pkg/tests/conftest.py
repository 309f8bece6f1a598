import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line per acceptance criterion; returns the verdict."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
