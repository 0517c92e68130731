import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from linident.model import EmbeddingTable, MlpArch, init_model

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    """5-d inputs, tanh MLP f, 7-label embedding g, M = 3."""
    return init_model(MlpArch((5, 8, 3), "tanh"), EmbeddingTable(7, 3), seed=3)


_criterion_of = {}
_criterion_ok = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _criterion_of[item.nodeid] = mark.args[0]


def pytest_runtest_logreport(report):
    n = _criterion_of.get(report.nodeid)
    if n is None:
        return
    if report.when == "call" or report.failed:
        _criterion_ok[n] = _criterion_ok.get(n, True) and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _criterion_ok:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criterion_ok):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if _criterion_ok[n] else 'FAIL'}")
