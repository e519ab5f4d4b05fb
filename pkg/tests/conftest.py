import pytest

_CRITERIA_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; fails the test when the check fails."""
    lines = request.config.stash[_CRITERIA_KEY]

    def report(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
