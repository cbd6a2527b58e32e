"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end of the run."""
import pytest

_RESULTS: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    if rep.when == "call" or rep.failed:
        detail = getattr(item, "criterion_detail", "")
        _RESULTS[n] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok, detail = _RESULTS[n]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
