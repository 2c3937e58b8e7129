import sys

import numpy as np
import pytest

from regioncl import tensor as T
from regioncl.dataset import SyntheticWorldConfig, generate_world


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def small_world():
    return generate_world(SyntheticWorldConfig(n_regions=24, image_shape=(3, 8, 8), comments_per_region=1, seed=11))


def tiny_world(**overrides):
    params = dict(n_regions=12, image_shape=(3, 8, 8), images_per_region=(1, 2), comments_per_region=1, seed=5)
    params.update(overrides)
    return generate_world(SyntheticWorldConfig(**params))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.RESULTS:
        terminalreporter.write_line(line)
