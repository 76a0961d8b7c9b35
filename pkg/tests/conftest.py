import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest
import torch

from app.config import CodecConfig, ModelConfig, ScheduleConfig
from data.cache_manager import CacheManager
from data.synthetic import render_scene
from models.checkpoint import new_checkpoint

TINY_ARCHITECTURE = dict(base_width=8, norm_groups=2, num_heads=2, context_dim=8, null_tokens=2)


def tiny_model_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY_ARCHITECTURE, **overrides})


@pytest.fixture
def tiny_checkpoint():
    return new_checkpoint(tiny_model_config(), CodecConfig(), ScheduleConfig(steps=2))


@pytest.fixture
def lossless_checkpoint():
    return new_checkpoint(
        tiny_model_config(latent_channels=48),
        CodecConfig(mode="lossless"),
        ScheduleConfig(steps=2),
    )


@pytest.fixture
def cache():
    return CacheManager(max_entries=4)


@pytest.fixture
def scene():
    return render_scene(16, 16, 4, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
