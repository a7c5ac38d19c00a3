"""Collects acceptance results so the run ends with one pass/fail line per criterion."""

import pytest

_RESULTS: dict[int, dict] = {}


@pytest.fixture(autouse=True)
def _criterion_tag(request, record_property):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        record_property("criterion", marker.args)


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when != "call" and not report.failed:
        return
    n, name = props["criterion"]
    entry = _RESULTS.setdefault(n, {"name": name, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and report.passed
    if "detail" in props and props["detail"] not in entry["details"]:
        entry["details"].append(props["detail"])


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        e = _RESULTS[n]
        line = f"criterion {n:>2} {'PASS' if e['ok'] else 'FAIL'}  {e['name']}"
        if e["details"]:
            line += "  [" + "; ".join(e["details"]) + "]"
        terminalreporter.write_line(line)
