import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria = {}  # criterion name -> list of outcomes
_owner = {}  # nodeid -> criterion name


def pytest_collection_finish(session):
    for item in session.items:
        marker = item.get_closest_marker("criterion")
        if marker:
            _owner[item.nodeid] = marker.args[0]
            _criteria.setdefault(marker.args[0], [])


def pytest_runtest_logreport(report):
    name = _owner.get(report.nodeid)
    if name is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[name].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _criteria.items():
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"{status:<8} {name}")
