import numpy as np
import pytest

from sm2.dataio import LinearRegressionSpec, TwoGaussiansSpec, generate_synthetic
from sm2.trainer import BuiltinLearnerSpec, LearnerKind


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def gaussians():
    return generate_synthetic(TwoGaussiansSpec(n_samples=4096, input_dim=4), seed=7)


@pytest.fixture(scope="session")
def regression():
    return generate_synthetic(LinearRegressionSpec(n_samples=4096, input_dim=3, noise_sigma=0.05), seed=11)


@pytest.fixture
def logistic_spec():
    return BuiltinLearnerSpec(LearnerKind.LOGISTIC_CLASSIFIER, input_dim=4, output_dim=2, seed=5)


_CRITERIA = {}  # number -> (title, passed so far)


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None or (report.when != "call" and report.passed):
        return
    number, title = crit
    ok = _CRITERIA.get(number, (title, True))[1] and report.passed
    _CRITERIA[number] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title}")
