import pytest

_results: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    title_, ok, notes = _results.get(n, (title, True, []))
    if failed and hasattr(rep.longrepr, "reprcrash"):
        notes.append(rep.longrepr.reprcrash.message.splitlines()[0][:160])
    if rep.when == "call":
        notes.extend(f"{v}" for k, v in rep.user_properties if k == "measured")
    _results[n] = (title_, ok and not failed, notes)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        title, ok, notes = _results[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if notes:
            line += "  [" + "; ".join(notes) + "]"
        tr.write_line(line)
