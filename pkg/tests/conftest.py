import numpy as np
import pytest

import groupdiff as gd


@pytest.fixture(scope="session")
def small_dataset():
    return gd.generate_dataset(gd.DatasetSpec(num_classes=4, images_per_class=8, seed=7))


@pytest.fixture(scope="session")
def small_index(small_dataset):
    return gd.build_index(small_dataset)


@pytest.fixture(scope="session")
def schedule():
    return gd.NoiseSchedule()


@pytest.fixture()
def tiny_config():
    return gd.ModelConfig(depth=2, hidden_dim=16, num_heads=2, patch_size=4,
                          image_size=8, channels=3, num_classes=4, max_group=6,
                          time_embed_dim=8, dtype="float64")


@pytest.fixture()
def tiny_model(tiny_config):
    return gd.DenoiserModel(tiny_config, seed=1)


def rand(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)
