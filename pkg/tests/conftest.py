"""Collects outcomes of tests marked ``criterion(n, title)`` and prints one line per criterion."""

import pytest

_RESULTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and report.passed
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]
    if report.failed:
        entry["details"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}" + (f"  [{detail}]" if detail else ""))
