import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# acceptance bookkeeping: criterion number -> detail text / outcome
_DETAIL = {}
_OUTCOME = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def record(request):
    """Attach a one-line measurement summary to the current criterion."""
    marker = request.node.get_closest_marker("criterion")

    def _record(detail):
        _DETAIL[marker.args[0]] = detail
        print(f"criterion {marker.args[0]}: {detail}")
    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed:
        _OUTCOME[n] = "FAIL"
    elif report.when == "call":
        _OUTCOME.setdefault(n, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOME:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOME):
        detail = _DETAIL.get(n, "")
        terminalreporter.write_line(f"criterion {n}: {_OUTCOME[n]}"
                                    + (f"  ({detail})" if detail else ""))
