"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_RESULTS: dict[str, dict] = {}


@pytest.fixture
def record(request):
    """record(text) attaches a detail string to the current criterion line."""
    def _add(text: str) -> None:
        request.node.user_properties.append(("detail", text))
    return _add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "status": "PASS", "details": []})
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        if rep.skipped:
            if entry["status"] == "PASS":
                entry["status"] = "SKIP"
        elif rep.failed:
            entry["status"] = "FAIL"
    if rep.when == "teardown":
        entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS, key=int):
        entry = _RESULTS[number]
        detail = "; ".join(entry["details"])
        line = f"[{entry['status']}] criterion {number}: {entry['title']}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
