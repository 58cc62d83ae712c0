import pytest

RESULTS: dict[int, tuple[bool, str]] = {}
_ACCEPTANCE_SECS = [0.0]


def record(n: int, ok: bool, detail: str):
    RESULTS[n] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


@pytest.fixture
def report():
    return record


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid:
        _ACCEPTANCE_SECS[0] += report.duration


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    elapsed = _ACCEPTANCE_SECS[0]
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        if n == 10:
            ok = ok and elapsed < 600
            detail += f"; acceptance suite runtime {elapsed:.0f} s (< 600 s required)"
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
