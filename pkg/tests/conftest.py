import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_deselected(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            _CRITERIA.setdefault(tuple(marker.args), {"ok": False, "seconds": 0.0,
                                                      "ran": False, "deselected": True})


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    entry = _CRITERIA.setdefault(crit, {"ok": True, "seconds": 0.0, "ran": False})
    if report.when == "call" or report.outcome != "passed":
        entry["ran"] = entry["ran"] or report.when == "call" or report.skipped
        entry["seconds"] += report.duration
        if report.failed:
            entry["ok"] = False
        if report.skipped:
            entry["skipped"] = True


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), e in sorted(_CRITERIA.items()):
        if e.get("deselected"):
            status = "NOT RUN"
        elif e.get("skipped"):
            status = "SKIP"
        else:
            status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n} [{status}] {title} ({e['seconds']:.1f}s)")
