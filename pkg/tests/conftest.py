import pytest

_CRITERIA: dict = {}


@pytest.fixture
def record():
    """Record a criterion outcome before asserting it, so failures are reported too."""

    def _record(number: int, ok: bool, detail: str) -> bool:
        prev = _CRITERIA.get(number)
        # a criterion passes only if every check filed under it passed
        if prev is not None:
            ok = ok and prev[0]
            detail = f"{prev[1]}; {detail}"
        _CRITERIA[number] = (ok, detail)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
