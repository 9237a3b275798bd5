import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from msseg3d.config import DataConfig, ExperimentConfig, ModelConfig, SourceConfig, TrainConfig
from msseg3d.volumes import SourceTransform

GOLDENS_PATH = Path(__file__).parent / "goldens.json"


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def make_tiny_config(seed: int = 0, **train_kwargs) -> ExperimentConfig:
    """16³ three-source config small enough for per-test training."""
    data = DataConfig(
        volume_dims=(16, 16, 16),
        class_count=2,
        num_teeth=1,
        seed=seed,
        test_per_source=2,
        sources=(
            SourceConfig("site-a", 4, True, SourceTransform(noise_stddev=0.02)),
            SourceConfig(
                "site-b", 4, False,
                SourceTransform(intensity_offset=0.03, noise_stddev=0.06, blur_radius=0.3),
            ),
            SourceConfig(
                "site-c", 4, False,
                SourceTransform(intensity_offset=-0.15, intensity_scale=0.8,
                                noise_stddev=0.18, blur_radius=0.8),
            ),
        ),
    )
    train = TrainConfig(**{"epochs": 1, "batch_size": 2, "seed": seed, **train_kwargs})
    return ExperimentConfig(data=data, train=train)


def make_small_config(seed: int = 0, ablation: str = "exp5", **train_kwargs) -> ExperimentConfig:
    """Tiny data plus a reduced network, for per-test training speed."""
    cfg = make_tiny_config(seed=seed, **train_kwargs)
    return dataclasses.replace(
        cfg, ablation=ablation, model=ModelConfig(base_channels=4, depth=2)
    )


def make_small_trainer(cfg):
    from msseg3d.dataset import build_cohort
    from msseg3d.trainer import Trainer

    cohort = build_cohort(cfg.data)
    mixed = [v for v in cohort.unlabeled if v.source_id == "site-b"]
    other = [v for v in cohort.unlabeled if v.source_id == "site-c"]
    return Trainer(cfg, cohort.labeled, mixed, other), cohort


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return make_tiny_config()


@pytest.fixture(scope="session")
def goldens() -> dict:
    if not GOLDENS_PATH.exists():
        pytest.skip("goldens.json not generated yet (run tests/regen_goldens.py)")
    return json.loads(GOLDENS_PATH.read_text())
