import numpy as np
import pytest

from src.data.datasets import SplitSpec, SyntheticSpec, holdout_split, make_splits, synth_clusters
from src.engine.protocol import TrainConfig
from src.models.backbone import ModelConfig


@pytest.fixture
def tiny_cfg():
    return ModelConfig(timesteps=2, embed_dim=16, num_blocks=1, num_heads=2, patch_size=4, image_size=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fast_train():
    return TrainConfig(epochs_task0=3, epochs_taskk=2, epochs_gate=3, batch_size=8, buffer_cap=16)


def make_sequence(classes=4, tasks=2, per_class=12, test_per_class=4, image_size=8, seed=0, margin=2.0, sigma=0.25):
    spec = SyntheticSpec(classes=classes, samples_per_class=per_class + test_per_class, margin=margin,
                         noise_sigma=sigma, seed=seed, image_shape=(1, image_size, image_size))
    train, test = holdout_split(synth_clusters(spec), test_per_class, seed)
    return make_splits(train, SplitSpec(classes, tasks), test)


@pytest.fixture
def tiny_seq():
    return make_sequence()
