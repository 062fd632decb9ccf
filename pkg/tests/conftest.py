import numpy as np
import pytest

from sparsemotion import kernels
from sparsemotion.kinematics import SkeletonModel, default_skeleton


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_skeleton():
    """Three-joint chain, too small for the full-body checks."""
    return SkeletonModel(parents=[-1, 0, 1],
                         offsets=[[0, 0, 0], [0, 0.5, 0], [0.3, 0.2, 0.1]],
                         leg_joints=(1,), tracked_joints=(0, 1, 2))


BACKENDS = sorted(kernels.implementations())


@pytest.fixture(params=BACKENDS)
def backend(request):
    return kernels.implementations()[request.param]


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion

_CRITERIA = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m:
            item.user_properties.append(("criterion", m.args[0]))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    name = props.get("criterion")
    if name is None:
        return
    if report.when == "call" or report.outcome != "passed":
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if report.when != "call" and report.outcome == "failed":
            status = "ERROR"
        _CRITERIA[name] = (status, props.get("measured", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, (status, measured) in _CRITERIA.items():
        tr.write_line(f"{status:5s} {name}: {measured}")
