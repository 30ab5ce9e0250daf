import pytest

from gssirepl import golden

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def cat():
    return golden.catalog()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
