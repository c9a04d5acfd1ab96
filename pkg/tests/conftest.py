import re

ACCEPTANCE_LINES: list[str] = []


def _criterion(line: str) -> int:
    return int(re.search(r"criterion (\d+)", line).group(1))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_criterion):
            terminalreporter.write_line(line)
