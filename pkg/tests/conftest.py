from __future__ import annotations

import pytest

_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.stash[_KEY] = {}


@pytest.fixture
def measured(request):
    """Collect short measurement notes shown next to the criterion's summary line."""
    notes: list[str] = []
    yield notes.append
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        entry = request.config.stash[_KEY].setdefault(marker.args[0], {"title": marker.args[1], "ok": True,
                                                                        "notes": []})
        entry["notes"].extend(notes)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    results = item.config.stash[_KEY]
    entry = results.setdefault(marker.args[0], {"title": marker.args[1], "ok": True, "notes": []})
    if report.failed or (report.when == "setup" and report.skipped):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        entry = results[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = f" [{'; '.join(entry['notes'])}]" if entry["notes"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {status}: {entry['title']}{detail}")
