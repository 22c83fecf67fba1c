import pytest

_VERDICTS_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, pytestconfig):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = pytestconfig.stash.setdefault(_VERDICTS_KEY, [])

    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}"
        lines.append(line)
        capture = request.config.pluginmanager.getplugin("capturemanager")
        with capture.global_and_fixture_disabled():
            print(f"\n[acceptance] {line}")
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
