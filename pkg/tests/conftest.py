import os
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

os.environ.setdefault("LOOPDET_WORKERS", "1")

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

PROPERTY_MODULES = ("test_geometry", "test_connection", "test_loopsoup", "test_spectral")
DURATIONS = {}
ACCEPTANCE_LINES = []


def pytest_collection_modifyitems(config, items):
    # acceptance runs last so that it can see the property-suite timings
    items.sort(key=lambda it: it.module.__name__.endswith("test_acceptance"))


def pytest_runtest_logreport(report):
    mod = report.nodeid.split("::")[0].rsplit("/", 1)[-1].removesuffix(".py")
    if mod in PROPERTY_MODULES:
        DURATIONS[report.nodeid] = DURATIONS.get(report.nodeid, 0.0) + report.duration


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("LOOPDET_OUTPUT_ROOT", str(tmp_path))
    return tmp_path
