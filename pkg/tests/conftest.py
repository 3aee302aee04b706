import pytest

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion and assert on it."""

    def report(number, title, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2} {title}: {detail}"
        _CRITERIA.append(line)
        print(line)
        assert passed, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
