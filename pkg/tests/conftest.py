import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def report_line():
    """Record one result line per acceptance criterion; all lines print at the end of the session."""
    def add(line: str) -> None:
        _LINES.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
