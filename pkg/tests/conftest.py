import os

import numpy as np
import pytest

from phantomage import phantom as ph
from phantomage.augment import AugmentConfig
from phantomage.encoder import EncoderConfig
from phantomage.train import TrainingConfig, load_dataset


@pytest.fixture(scope="session")
def tiny_phantom_config():
    return ph.PhantomConfig()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_phantom_config):
    """30 phantoms with a manifest; shared read-only across tests."""
    out = tmp_path_factory.mktemp("tiny_ds")
    ph.generate_dataset(30, tiny_phantom_config, str(out), seed=5)
    return str(out)


@pytest.fixture(scope="session")
def tiny_split_data(tiny_dataset):
    return load_dataset(tiny_dataset)


@pytest.fixture
def small_encoder_config():
    return EncoderConfig()


@pytest.fixture
def fast_training_config():
    return TrainingConfig(batch_size=8, stage1_epochs=2, stage2_epochs=2,
                          baseline_epochs=2, patience=5, checkpoint_every=1,
                          seed=3)


@pytest.fixture
def no_augment():
    return AugmentConfig(p_translate=0, p_rotate=0, p_noise=0, p_crop=0)


def rng(seed=0):
    return np.random.default_rng(seed)
