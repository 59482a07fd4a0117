import pytest

from acceptance_report import RESULTS


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, title, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the test still asserts on it."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        RESULTS[number] = (bool(ok), title, detail)
        print(f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return bool(ok)

    return record
