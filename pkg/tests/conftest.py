import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from aullm.config import default_config
from aullm.data import ClipDataset, SyntheticConfig, generate_synthetic

torch.set_num_threads(1)
os.environ.pop("AULLMXX_SEED", None)

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_synthetic():
    """3 subjects x 6 clips at the reference resolution."""
    return generate_synthetic(SyntheticConfig(num_subjects=3, clips_per_subject=6))


@pytest.fixture(scope="session")
def small_dataset(small_synthetic):
    return ClipDataset.from_synthetic(small_synthetic)


@pytest.fixture
def quick_cfg():
    return default_config(**{"trainer.epochs": 1, "trainer.batch_size": 8})


@pytest.fixture
def rng():
    return np.random.default_rng(0)
