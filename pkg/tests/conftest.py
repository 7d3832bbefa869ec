import os
import pathlib
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

FIXTURES = pathlib.Path(__file__).parent / "fixtures"

# JIT compilation lands inside whichever example runs first.
settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def fixtures():
    return FIXTURES


@pytest.fixture(scope="session")
def fragment_text():
    return (FIXTURES / "tree_fragment.dtm").read_text()


@pytest.fixture(scope="session")
def fragment(fragment_text):
    from flowforge.nids import load_model
    return load_model(fragment_text)


# --- acceptance report --------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line in the terminal
# summary; ``record_property("detail", ...)`` adds measured values to it.

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if report.failed:
        reason = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else ""
        detail = f"{detail} | {reason.splitlines()[0] if reason else report.when + ' failed'}"
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _CRITERIA[number] = f"criterion {number} {status}: {title} ({report.duration:.2f} s) {detail}"


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number].rstrip())
