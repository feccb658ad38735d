import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore", message=".*TBB.*")


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


def pytest_addoption(parser):
    parser.addoption("--run-optional", action="store_true", default=False,
                     help="also run the optional long-running reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-optional"):
        return
    skip = pytest.mark.skip(reason="optional long-running reproduction "
                                   "(enable with --run-optional)")
    for item in items:
        if "optional" in item.keywords:
            item.add_marker(skip)
