from dataclasses import replace

import pytest

from cola.helpers.config_helpers import load_config, load_dataset
from cola.training import run_training

pytestmark = pytest.mark.slow


def final_accuracy(config, data_dir, **overrides):
    config = replace(config, data_dir=data_dir, **overrides)
    config.validate()
    train, test = load_dataset(config)
    history = run_training(config, train, test_dataset=test).history
    return [record for record in history if record['split'] == 'test'][-1]['accuracy']


def test_mnist_shapes(mnist_dir):
    config = replace(load_config('mnist_linear'), data_dir=mnist_dir)
    train, test = load_dataset(config)
    assert (len(train), len(test)) == (60000, 10000)
    assert train.in_dim == 784
    assert train.inputs.max() <= 1.0


def test_linear_preset_matches_full_fine_tuning(mnist_dir):
    config = load_config('mnist_linear')
    full = final_accuracy(config, mnist_dir, variant='full')
    merged = final_accuracy(config, mnist_dir)
    lowrank = final_accuracy(config, mnist_dir, adapter='lowrank', rank=8)
    assert full >= 0.908
    assert abs(merged - full) <= 0.015
    assert lowrank <= merged + 0.01


def test_mlp_preset_prefers_linear_adapters(mnist_dir):
    config = load_config('mnist_mlp')
    lowrank = final_accuracy(config, mnist_dir)
    linear = final_accuracy(config, mnist_dir, adapter='linear')
    assert linear >= lowrank
