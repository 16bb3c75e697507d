import pytest

_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict: ``criterion(n, ok, detail)``."""

    def record(n, ok, detail=""):
        prev = _CRITERIA.get(n)
        ok = ok and (prev is None or prev[0])
        details = [d for d in ((prev[1] if prev else ""), detail) if d]
        _CRITERIA[n] = (ok, "; ".join(details))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
