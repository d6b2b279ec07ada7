"""Shared pytest plumbing.

The acceptance tests in test_acceptance.py are marked with
``@pytest.mark.acceptance(tag, description)``.  A terminal-summary hook
prints one PASS/FAIL line per tagged test so the acceptance status is
readable at a glance from the bottom of any full run.
"""

import pytest

_ACCEPTANCE_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "acceptance(tag, description): tag a test as an acceptance criterion",
    )
    config.addinivalue_line(
        "markers",
        "slow: long-running test (deselect with -m 'not slow')",
    )


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.skipped):
        return
    entry = _ACCEPTANCE_RESULTS.get(report.nodeid)
    if entry is None:
        return
    tag, desc, _ = entry
    if report.skipped:
        outcome = "SKIP"
    else:
        outcome = "PASS" if report.passed else "FAIL"
    _ACCEPTANCE_RESULTS[report.nodeid] = (tag, desc, outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_setup(item):
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        tag = marker.args[0]
        desc = marker.args[1] if len(marker.args) > 1 else item.name
        _ACCEPTANCE_RESULTS[item.nodeid] = (tag, desc, "NOT RUN")
    yield


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for tag, desc, outcome in sorted(_ACCEPTANCE_RESULTS.values()):
        tr.write_line(f"[{outcome:>7s}] {tag}: {desc}")
