"""Shared fixtures: a small network, a random batch and on-disk synthetic datasets."""

import numpy as np
import pytest

from wsol.autodiff import Tensor
from wsol.config import DatasetSpec, ModelConfig, get_settings
from wsol.data import generate
from wsol.model import init


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    """Settings are cached; every test starts from a clean environment."""
    for key in ("WSOL_THREADS", "WSOL_DEBUG", "WSOL_LOG_LEVEL", "WSOL_LOG_JSON"):
        monkeypatch.delenv(key, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def small_config():
    # 32x32 input, 8x8 features, 4x4 score map
    return ModelConfig(input_size=32, num_classes=3, feature_channels=4, feature_stride=4, backbone_blocks=2, seed=0)


@pytest.fixture
def small_net(small_config):
    return init(small_config)


@pytest.fixture
def batch(small_config):
    rng = np.random.default_rng(7)
    images = Tensor(rng.uniform(0.0, 1.0, size=(2, 3, small_config.input_size, small_config.input_size)))
    labels = np.array([0, 2])
    return images, labels


@pytest.fixture
def tiny_spec():
    return DatasetSpec(num_classes=3, samples_per_class=2, image_size=32, seed=3)


@pytest.fixture
def dataset_dir(tmp_path, tiny_spec):
    out = tmp_path / "data"
    generate(tiny_spec, out)
    return out
