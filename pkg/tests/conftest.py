import pytest

CRITERIA: dict[int, str] = {}


@pytest.fixture
def report_criterion(capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(number: int, title: str, checks: list[tuple[str, bool]]) -> bool:
        ok = all(passed for _, passed in checks)
        detail = "; ".join(f"{name}: {'ok' if passed else 'FAIL'}" for name, passed in checks)
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title} | {detail}"
        CRITERIA[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
