import pytest

_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_KEY] = []


@pytest.fixture
def criterion(request):
    """``report(label, ok, detail)`` records one acceptance line, then asserts ``ok``."""
    lines = request.config.stash[_KEY]

    def report(label, ok, detail=""):
        lines.append((label, bool(ok), detail))
        assert ok, f"{label}: {detail}"

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in lines:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}")
