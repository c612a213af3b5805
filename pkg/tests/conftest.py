import pytest

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints a PASS/FAIL/SKIP line, then asserts ``ok``."""

    def record(n: int, ok: bool | None, detail: str) -> None:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {n:>2}: {status}  {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        if ok is None:
            pytest.skip(detail)
        assert ok, line

    return record
