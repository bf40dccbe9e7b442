"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
import pytest

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    num, title = mark.args
    entry = _criteria.setdefault(num, {"title": title, "ok": True, "detail": []})
    if rep.failed:
        entry["ok"] = False
        entry["detail"].append(str(rep.longrepr).strip().splitlines()[-1][:160])
    for key, val in item.user_properties:
        if key == "detail" and rep.when == "call":
            entry["detail"].append(val)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        e = _criteria[num]
        status = "PASS" if e["ok"] else "FAIL"
        detail = "; ".join(dict.fromkeys(e["detail"]))
        terminalreporter.write_line(f"[{status}] criterion {num}: {e['title']}" + (f" ({detail})" if detail else ""))
