import pytest

# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(n: int, checks: dict[str, bool], detail: str = "") -> None:
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        note = detail + (f" failed: {', '.join(failed)}" if failed else "")
        ACCEPTANCE[n] = (ok, note.strip())
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {note}".rstrip())
        assert ok, note
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, note = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {note}")
