import pytest

VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance line, then fail the test if the criterion does not hold."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        request.config.stash[VERDICTS][number] = (ok, line)
        print(line)
        assert ok, line

    return record


@pytest.fixture
def verdicts(request):
    return request.config.stash[VERDICTS]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n][1])
