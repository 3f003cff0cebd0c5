import numpy as np
import pytest

from dpsurvey.core import Bounds, SurveySample

TOY_N, TOY_n = 100, 10


@pytest.fixture
def toy_bounds():
    return Bounds(0.0, 1.0, 1.0, 20.0)


@pytest.fixture
def toy_sample(toy_bounds):
    # theta_0 = 0.5, theta_w = 0.6, awd = 0.1
    y = np.r_[np.ones(5), np.zeros(5)]
    w = np.r_[np.full(5, 12.0), np.full(5, 8.0)]
    return SurveySample(y, w, TOY_N, toy_bounds)


@pytest.fixture
def toy_summary(toy_sample):
    return toy_sample.summary()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
