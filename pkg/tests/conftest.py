import numpy as np
import pytest

_CRITERIA: dict[str, tuple[str, list[str]]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    title_, outcomes = _CRITERIA.setdefault(str(number), (title, []))
    outcomes.append("pass" if call.excinfo is None else "fail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA, key=int):
        title, outcomes = _CRITERIA[number]
        status = "PASS" if all(o == "pass" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {title} ({len(outcomes)} checks)")
