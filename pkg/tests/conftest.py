import numpy as np
import pytest

from otpbase.odesign import farthest_point_design, grid_design
from otpbase.oproblem import Newsvendor, NewsvendorSpec
from otpbase.oschemas import RngStream


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def newsvendor():
    return Newsvendor()


@pytest.fixture
def single_product():
    """d=1, q=1 with mu=0: theta*(x) = (1 + 0.3 z) x is linear on [0, 3]."""
    return Newsvendor(NewsvendorSpec(q=1, d=1, idiosyncratic_means=[0.0]))


@pytest.fixture
def noiseless():
    return Newsvendor(NewsvendorSpec(q=1, d=1, noise_scale=0.0, idiosyncratic_means=[0.0]))


@pytest.fixture
def grid_5x5():
    return grid_design(0.0, 3.0, 5, 2)


@pytest.fixture
def random_design():
    return farthest_point_design(0.0, 3.0, 40, 400, RngStream(seed=7), d=2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
