"""Collects acceptance results and prints one PASS/FAIL line per criterion."""
import pytest

_details: dict[int, str] = {}
_outcomes: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def record(request):
    """``record(text)`` attaches a one-line measurement to the current criterion."""
    n = request.node.get_closest_marker("criterion").args[0]

    def _record(text: str) -> None:
        _details[n] = text

    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _outcomes[n] = "PASS" if rep.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        line = f"criterion {n:>2}: {_outcomes[n]}"
        if n in _details:
            line += f"  {_details[n]}"
        terminalreporter.write_line(line)
