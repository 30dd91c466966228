import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
VERDICTS: dict[int, tuple[bool, str]] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


@pytest.fixture
def record():
    return verdict


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
