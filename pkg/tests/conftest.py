import os

import numpy as np
import pytest

from component_logger import access_log


def pytest_collection_modifyitems(config, items):
    if os.getenv("TEEG_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set TEEG_RUN_SLOW=1 to run end-to-end tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def clean_access_log():
    access_log.clear()
    yield
    access_log.clear()
