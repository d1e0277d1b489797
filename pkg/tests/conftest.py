import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src", "lib"))

from s2me.config import TrainConfig  # noqa: E402
from s2me.data import generate_synthetic_dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """32 px corpus: 6 train, 3 val, 3 test"""
    root = tmp_path_factory.mktemp("tiny_dataset")
    return generate_synthetic_dataset(root, n_train=6, n_val=3, n_test=3, size=32, seed=7, n_jobs=1)


@pytest.fixture
def tiny_config():
    return TrainConfig(
        iterations=4,
        batch_size=2,
        ramp_iters=3,
        eval_every=2,
        base_width=4,
        depth=2,
        crop_max=1,
        seed=0,
    )
