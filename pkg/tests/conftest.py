import sys

import pytest

from hallucigrid.datagen import DatasetConfig, MaskSpec, WorldSpec
from hallucigrid.neuralnet import NetConfig
from hallucigrid.supervision import TrainConfig


def tiny_dataset_config() -> DatasetConfig:
    """16x16 crops from 64x64 worlds: seconds to generate, cache and train."""
    return DatasetConfig(
        prior_worlds=[WorldSpec(seed=s, size=64) for s in (1, 2)],
        observation_worlds=[WorldSpec(seed=s, size=64) for s in (11, 12)],
        holdout_worlds=[WorldSpec(seed=21, size=64)],
        mask=MaskSpec(seed=0, occluder_count=(0, 2), dropout=0.05),
        window=16, prior_stride=8, observation_stride=16, n_train=16, n_test=8, n_holdout=10)


TINY_NET = NetConfig(depth=2, base_channels=2)


def tiny_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"epochs": 1, "batch_size": 8, "k": 4, "val_every": 1, **overrides})


@pytest.fixture(scope="session")
def tiny_config():
    return tiny_dataset_config()


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
