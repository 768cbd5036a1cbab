import pytest

_verdicts: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one acceptance line: verdict(n, ok, text). Printed in the terminal summary."""
    def record(n: int, ok: bool, text: str) -> bool:
        _verdicts[n] = f"{'PASS' if ok else 'FAIL'}  criterion {n:2d}: {text}"
        print(_verdicts[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        terminalreporter.write_line(_verdicts[n])
