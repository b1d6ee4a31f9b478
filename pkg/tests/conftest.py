import pytest

_LINES = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for the acceptance summary and return the flag."""
    def record(name, ok, detail=""):
        _LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
        print(_LINES[-1])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
