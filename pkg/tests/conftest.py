import numpy as np
import pytest

import experiments
from adamatch import selftest


@pytest.fixture(scope="session")
def data_dir():
    """IDX export of the bundled MNIST subset and UCI digits (written once, then reused)."""
    pytest.importorskip("sklearn")
    pytest.importorskip("mlxtend")
    return experiments.data_dir()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# factories shared with the selftest suite
@pytest.fixture
def toy_dataset():
    return selftest.toy_dataset


@pytest.fixture
def toy_task():
    return selftest.toy_task


@pytest.fixture
def toy_config():
    return selftest.toy_config
