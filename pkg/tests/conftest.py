import pytest

_ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of an acceptance criterion and print it.

    Usage: ``criterion(number, ok, detail)``; the test should still assert
    ``ok`` afterwards so a failing criterion fails the test.
    """

    def record(number: int, ok: bool, detail: str = ""):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[k])
