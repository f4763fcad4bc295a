import numpy as np
import pytest

from sparsefuse.geometry import CameraModel


@pytest.fixture
def simple_cam():
    """fx=fy=100, principal point (50, 50), identity pose."""
    return CameraModel(100.0, 100.0, 50.0, 50.0, np.eye(3), np.zeros(3), width=100, height=100)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    number, title = mark.args
    if report.failed or (report.when == "call"):
        prev = _criteria.get(number, (title, "PASS"))[1]
        status = "FAIL" if report.failed or prev == "FAIL" else "PASS"
        _criteria[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
