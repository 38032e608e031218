import pytest

_ACCEPTANCE = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the test itself still asserts."""
    def record(number, ok, detail):
        _ACCEPTANCE[number] = (bool(ok), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number!s:>4}: {'PASS' if ok else 'FAIL'}  {detail}")
