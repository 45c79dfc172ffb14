import re

_RESULTS: dict = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_(a\d+)_", report.nodeid)
    if not m or report.when not in ("setup", "call"):
        return
    key = m.group(1).upper()
    if report.when == "setup" and report.passed:
        return
    detail = dict(report.user_properties).get("detail", "")
    _RESULTS[key] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=lambda k: int(k[1:])):
        status, detail = _RESULTS[key]
        terminalreporter.write_line(f"{key} {status} {detail}".rstrip())
