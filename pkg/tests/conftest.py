import pytest

VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance outcome; the line is printed in the terminal summary and the test asserts it."""
    def record(number: int, title: str, ok: bool, detail: str):
        VERDICTS.append((number, title, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}: {detail}")
        assert ok, f"criterion {number} ({title}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number:>2}  {title}: {detail}")
