"""Release-gate reporting shared by both test suites.

Tests marked @pytest.mark.criterion("...") get one PASS/FAIL line on the
terminal per run, visible without -s because the line is emitted from the
report hook rather than from inside the captured test body.
"""

import pytest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            report.criterion_label = marker.args[0]


def pytest_runtest_logreport(report):
    label = getattr(report, "criterion_label", None)
    if label is not None:
        print(f"\n{label}: {'PASS' if report.passed else 'FAIL'}", flush=True)
