import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    n, title = mark.args
    entry = _RESULTS.setdefault(n, {"title": title, "ok": True, "detail": []})
    entry["ok"] = entry["ok"] and report.passed
    entry["detail"] += [f"{k}={v}" for k, v in item.user_properties]
    if report.failed:
        entry["detail"].append(str(report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash")
                                   else report.longrepr).splitlines()[0][:160])


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        status = "PASS" if r["ok"] else "FAIL"
        detail = "; ".join(r["detail"])
        terminalreporter.write_line(f"criterion {n} {status}  {r['title']}" + (f"  [{detail}]" if detail else ""))
