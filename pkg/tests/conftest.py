"""Collect acceptance outcomes and print one PASS/FAIL line per criterion."""

import pytest

_OUTCOMES = {}
_RANK = ["SKIP", "PASS", "FAIL"]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when != "call" and not (rep.failed or rep.skipped):
        return
    label = marker.args[0]
    status = "SKIP" if rep.skipped else ("FAIL" if rep.failed else "PASS")
    measured = [str(v) for k, v in rep.user_properties if k == "measured"]
    prev_status, prev_measured = _OUTCOMES.get(label, ("SKIP", []))
    # the worst outcome across a criterion's tests wins
    worst = max(prev_status, status, key=_RANK.index)
    _OUTCOMES[label] = (worst, prev_measured + measured)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_OUTCOMES, key=lambda s: int(s[2:])):
        status, measured = _OUTCOMES[label]
        terminalreporter.write_line(f"{status} {label}" + (f"  {'; '.join(measured)}" if measured else ""))
