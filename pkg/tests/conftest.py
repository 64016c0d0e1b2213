"""Collects one pass/fail line per acceptance criterion and prints them at the
end of the run."""

import re

CRITERIA = {}
DETAILS = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_(a\d+)_", report.nodeid)
    if not m:
        return
    key = m.group(1).upper()
    if report.when == "call" or report.outcome == "failed":
        ok = report.outcome == "passed"
        CRITERIA[key] = CRITERIA.get(key, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: int(k[1:])):
        line = f"{key}: {'PASS' if CRITERIA[key] else 'FAIL'}"
        if key in DETAILS:
            line += f"  ({DETAILS[key]})"
        terminalreporter.write_line(line)
