"""Collects outcomes of ``@pytest.mark.criterion`` tests and prints one verdict line per criterion."""

import pytest

_results: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    entry = _results.setdefault(number, {"title": title, "ok": True, "failed": []})
    if report.failed:
        entry["ok"] = False
        entry["failed"].append(item.name)
    elif report.skipped:
        entry["ok"] = False
        entry["failed"].append(f"{item.name} (skipped)")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        r = _results[number]
        verdict = "PASS" if r["ok"] else "FAIL"
        detail = "" if r["ok"] else f"  ({', '.join(r['failed'])})"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {r['title']}{detail}")
