import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))  # for oracles.py

settings.register_profile(
    "edgeped",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("edgeped")

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")
REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture(scope="session")
def data_dir():
    return DATA_DIR


@pytest.fixture(scope="session")
def repo_root():
    return REPO_ROOT


@pytest.fixture(scope="session")
def mini_model():
    from edgeped.config import mini_config
    from edgeped.model import build_model

    return build_model(mini_config())


@pytest.fixture(scope="session")
def mini_model_random():
    from edgeped.config import mini_config
    from edgeped.model import build_model, randomize_weights

    return randomize_weights(build_model(mini_config()), seed=11)


@pytest.fixture(scope="session")
def reference_model():
    from edgeped.config import reference_config
    from edgeped.model import build_model

    return build_model(reference_config())


def random_tensor(rng: np.random.Generator, n, c, h, w, lo=-1.0, hi=1.0):
    from edgeped.tensor import Tensor

    return Tensor((rng.random((n, c, h, w)) * (hi - lo) + lo).astype(np.float32))
