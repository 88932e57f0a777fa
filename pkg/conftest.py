import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

import numpy as np
import pytest

import diffcore as dc
from checkpoint_registry import CheckpointRegistry
from config import build_config


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance runs, enabled with LIFTED3D_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("LIFTED3D_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set LIFTED3D_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def float64_default():
    dc.set_default_dtype(np.float64)
    dc.set_finite_checks(False)
    yield
    dc.set_default_dtype(np.float64)
    CheckpointRegistry.reset_instances()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = {
    "image_size": 8,
    "latent_dim": 8,
    "width": 0.03125,
    "embed_dim": 8,
    "batch_size": 2,
    "steps": 3,
    "prior_samples": 500,
    "checkpoint_interval": 2,
    "log_interval": 1,
    "learning_rate": 1e-3,
    "dtype": "float64",
    "seed": 1,
}


@pytest.fixture
def tiny_config():
    """Factory for desk-sized configs small enough for unit tests."""
    def make(**overrides):
        return build_config({**TINY, **overrides})
    return make
