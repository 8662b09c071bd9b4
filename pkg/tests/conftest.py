import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line for a criterion, then assert it."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} ({title}): {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
