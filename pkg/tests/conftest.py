import time

import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _RESULTS[number] = (title, rep.outcome, rep.duration)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, outcome, secs = _RESULTS[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        tr.write_line(f"criterion {number}: {verdict} ({secs:.1f} s) {title}")


@pytest.fixture
def stopwatch():
    t0 = time.perf_counter()
    return lambda: time.perf_counter() - t0
