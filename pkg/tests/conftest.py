"""
Shared fixtures: a 32x32 phantom population and networks small enough to
train for a handful of iterations on CPU inside the default test run.
"""

import numpy as np
import pytest
import torch

from core.configs import (
    AugmentConfig, ExperimentConfig, RegNetConfig, SegNetConfig, SyntheticPopConfig, TrainConfig,
)
from core.synthetic import synth_population
from core.volume import Atlas, LabelMap, Volume

TINY_SHAPE = (32, 32)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_pop_cfg() -> SyntheticPopConfig:
    return SyntheticPopConfig(
        shape=TINY_SHAPE, spacing=(1.0, 1.0),
        n_train=3, n_val=1, n_test=2, n_unlabeled=3,
        deform_amplitude=2.0, deform_spacing=16, rng_seed=0,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_pop_cfg):
    return synth_population(tiny_pop_cfg)


@pytest.fixture(scope="session")
def tiny_regnet_cfg() -> RegNetConfig:
    return RegNetConfig(
        inshape=TINY_SHAPE, enc_filters=[4, 4, 4, 4], dec_filters=[4, 4, 4, 4, 4, 4], levels=4,
    )


@pytest.fixture(scope="session")
def tiny_segnet_cfg() -> SegNetConfig:
    return SegNetConfig(
        num_labels=4, enc_filters=[4, 4, 4, 4], dec_filters=[4, 4, 4, 4, 4, 4], levels=4,
        patch_size=(16, 16),
    )


@pytest.fixture(scope="session")
def tiny_train_cfg() -> TrainConfig:
    return TrainConfig(
        iterations=4, learning_rate=1e-3, checkpoint_every=2, log_every=2,
        augment=AugmentConfig(control_spacing=16, max_amplitude=1.0),
    )


@pytest.fixture
def tiny_experiment_cfg(tmp_path, tiny_pop_cfg, tiny_regnet_cfg, tiny_segnet_cfg, tiny_train_cfg):
    def make(**overrides) -> ExperimentConfig:
        fields = dict(
            n_range=[1], n_repeats=1, methods=["MAS"],
            registration=tiny_train_cfg, segmentation=tiny_train_cfg,
            regnet=tiny_regnet_cfg, segnet=tiny_segnet_cfg, data=tiny_pop_cfg,
            data_dir=str(tmp_path / "data"), output_dir=str(tmp_path / "run"),
        )
        fields.update(overrides)
        return ExperimentConfig(**fields)
    return make


def cube_labels(shape, corner, size, num_labels=2, label=1) -> LabelMap:
    arr = np.zeros(shape, dtype=np.int32)
    arr[tuple(slice(c, c + size) for c in corner)] = label
    return LabelMap(arr, num_labels=num_labels)


def random_atlas(rng: np.random.Generator, shape=(16, 16), num_labels=3, atlas_id="a") -> Atlas:
    labels = rng.integers(0, num_labels, size=shape).astype(np.int32)
    image = rng.normal(size=shape).astype(np.float32)
    return Atlas(image=Volume(image), labels=LabelMap(labels, num_labels=num_labels), id=atlas_id)
