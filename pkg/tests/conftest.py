import os
from dataclasses import replace

import numpy as np
import pytest

from cola.adapters import Adapter, AdapterSpec, init_adapter
from cola.helpers.data_loader import synth_dataset
from cola.models import build_model
from cola.training import TrainingConfig

SMALL_CONFIG = TrainingConfig(
    classes=4,
    per_class=32,
    test_per_class=16,
    dims=12,
    separation=6.0,
    model='mlp',
    hidden=(10,),
    adapter='lowrank',
    rank=2,
    batch_size=8,
    iterations=12,
    lr=0.1,
)


@pytest.fixture
def make_config():
    """Small synthetic config; keyword arguments override fields."""

    def _make(**overrides) -> TrainingConfig:
        config = replace(SMALL_CONFIG, **overrides)
        config.validate()
        return config

    return _make


@pytest.fixture
def small_data():
    config = SMALL_CONFIG
    train = synth_dataset(config.classes, config.per_class, config.dims, config.separation, config.seed)
    test = synth_dataset(config.classes, config.test_per_class, config.dims, config.separation, config.seed, 'test')
    return train, test


@pytest.fixture
def small_model():
    return build_model('mlp', seed=0, in_dim=12, out_dim=4, hidden=(10,))


def nonzero_adapters(model, kind: str, users: int = 1, seed: int = 0, rank: int = 2, hidden: int = 8):
    """{(m, k): Adapter} with every parameter perturbed away from its zero-output start."""
    rng = np.random.default_rng(seed)
    adapters = {}
    for k in range(users):
        for m in range(model.M):
            in_dim, out_dim = model.layer_dims(m)
            adapter = init_adapter(AdapterSpec(kind, in_dim, out_dim, rank=rank, hidden=hidden), seed + 100 * k + m)
            params = {name: value + 0.3 * rng.normal(size=value.shape) for name, value in adapter.params.items()}
            adapters[(m, k)] = Adapter.from_parameters(kind, params)
    return adapters


@pytest.fixture
def mnist_dir():
    path = os.getenv('COLA_MNIST_DIR')
    if not path:
        pytest.skip("COLA_MNIST_DIR is not set")
    return path
