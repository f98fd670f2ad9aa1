import pytest

_VERDICTS = []


@pytest.fixture
def verdict(request):
    """Print and record one acceptance line, then fail the test if it did not pass."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def report(number, title, ok, detail):
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _VERDICTS.append((number, line))
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
