import numpy as np
import pytest

from abrforge.candidates import builtin
from abrforge.traces import Trace, TraceDataset


def constant_trace(id="const", mbps=5.0, seconds=10):
    return Trace.from_samples(id, [(0, mbps), (seconds, mbps)])


@pytest.fixture
def const5_dataset():
    return TraceDataset("const5", [constant_trace("tr", 5.0)], [constant_trace("te", 5.0)])


@pytest.fixture
def small_dataset():
    rng = np.random.default_rng(3)
    traces = [Trace.from_samples(f"t{i}", [(k, float(rng.uniform(0.5, 4.0))) for k in range(60)])
              for i in range(6)]
    return TraceDataset("small", traces[:4], traces[4:])


@pytest.fixture(scope="session")
def base_state():
    return builtin("pensieve_original")


@pytest.fixture(scope="session")
def base_net():
    return builtin("original_a2c")


# -- acceptance criteria reporting -------------------------------------------

_criteria: dict[int, tuple[str, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        _criteria[number] = (title, status, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, seconds = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {status}  ({seconds:.1f} s)  {title}")
