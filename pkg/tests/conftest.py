import pytest

_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_KEY] = {}


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Dict ``criterion id -> (passed, detail)`` printed at the end of the session."""
    return request.config.stash[_KEY]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    report = config.stash.get(_KEY, {})
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(report, key=lambda k: int(k.split()[0])):
        passed, detail = report[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {key}: {detail}")
