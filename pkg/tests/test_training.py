import logging

import numpy as np
import pytest
from conftest import nonzero_adapters

from cola.helpers.data_loader import synth_dataset
from cola.helpers.errors import ConfigError, MergeStateError
from cola.models import build_model
from cola.offload import spawn_offload
from cola.optim import SGD
from cola.training import Trainer, classical_step, evaluate, full_step, init_adapters, run_training


def assert_same_adapters(actual, expected, atol):
    assert sorted(actual) == sorted(expected)
    for key, adapter in expected.items():
        for name, value in adapter.params.items():
            np.testing.assert_allclose(actual[key].params[name], value, atol=atol, rtol=0)


@pytest.mark.parametrize('variant', ['unmerged', 'merged'])
def test_interval_one_matches_classical_backprop(make_config, small_data, variant):
    train, _ = small_data
    classical = run_training(make_config(variant='classical'), train)
    offloaded = run_training(make_config(variant=variant), train)
    assert_same_adapters(offloaded.adapters, classical.adapters, atol=1e-10)
    assert [r['loss'] for r in offloaded.history] == pytest.approx([r['loss'] for r in classical.history], abs=1e-10)


def test_effective_batch_equals_large_batch_gradient_descent(make_config, small_data):
    train, _ = small_data
    assert len(train) % 32 == 0
    buffered = run_training(make_config(variant='merged', batch_size=8, interval=4, iterations=200), train)
    large_batch = run_training(make_config(variant='classical', batch_size=32, interval=1, iterations=50), train)
    assert buffered.trainer.flush_count == 50
    assert_same_adapters(buffered.adapters, large_batch.adapters, atol=1e-8)


def test_zero_learning_rate_keeps_adapters(make_config, small_data):
    train, _ = small_data
    config = make_config(lr=0.0)
    result = run_training(config, train)
    initial = init_adapters(result.model, config, users=1)
    assert_same_adapters(result.adapters, initial, atol=0.0)


def test_counters_for_merged_training(make_config, small_data):
    train, _ = small_data
    result = run_training(make_config(variant='merged', interval=4, iterations=12), train)
    trainer = result.trainer
    assert trainer.backward_count == 12
    assert trainer.merge_count == trainer.unmerge_count == 12
    assert trainer.flush_count == 3
    assert result.offload_report.conserved
    assert result.offload_report.buffered == 0


def test_unmerged_training_never_merges(make_config, small_data):
    train, _ = small_data
    trainer = run_training(make_config(variant='unmerged'), train).trainer
    assert trainer.backward_count == 12
    assert trainer.merge_count == 0


def test_partial_final_interval_is_flushed_with_warning(make_config, small_data, caplog):
    train, _ = small_data
    with caplog.at_level(logging.WARNING, logger='cola.training'):
        result = run_training(make_config(interval=4, iterations=10), train)
    assert result.trainer.flush_count == 3
    assert result.offload_report.buffered == 0
    assert any('partial' in message for message in caplog.messages)


def test_theta_is_untouched_by_adapter_training(make_config, small_data):
    train, _ = small_data
    config = make_config(variant='merged')
    before = build_model(config.model, seed=config.seed, in_dim=12, out_dim=4, hidden=config.hidden).parameter_hash()
    result = run_training(config, train)
    assert result.model.parameter_hash() == before


def test_full_variant_trains_theta(make_config, small_data):
    train, _ = small_data
    config = make_config(variant='full')
    before = build_model(config.model, seed=config.seed, in_dim=12, out_dim=4, hidden=config.hidden).parameter_hash()
    result = run_training(config, train)
    assert result.model.parameter_hash() != before
    assert result.adapters == {}
    assert result.offload_report is None


def test_full_step_needs_unfrozen_model(small_model):
    with pytest.raises(ConfigError):
        full_step(small_model, np.ones((2, 12)), np.array([0, 1]), SGD(0.1))


def test_classical_step_needs_frozen_model(small_model):
    adapters = nonzero_adapters(small_model, 'lowrank')
    optimizers = {key: SGD(0.1) for key in adapters}
    batch, labels = np.ones((2, 12)), np.array([0, 1])
    before = small_model.parameter_hash()
    classical_step(small_model, adapters, batch, labels, optimizers)
    assert small_model.parameter_hash() == before

    small_model.unfreeze()
    with pytest.raises(ConfigError):
        classical_step(small_model, adapters, batch, labels, optimizers)


def test_full_variant_freezes_model_when_done(make_config, small_data):
    train, _ = small_data
    result = run_training(make_config(variant='full'), train)
    assert result.model.frozen


def test_trainer_checks_offload_handle(make_config, small_model):
    adapters = init_adapters(small_model, make_config())
    with pytest.raises(ConfigError):
        Trainer(small_model, adapters, make_config(variant='merged'))
    with spawn_offload(1) as offload:
        with pytest.raises(ConfigError):
            Trainer(small_model, adapters, make_config(variant='classical'), offload=offload)


def test_step_refuses_adapters_left_merged(make_config, small_model):
    adapters = init_adapters(small_model, make_config())
    with spawn_offload(1) as offload:
        trainer = Trainer(small_model, adapters, make_config(variant='merged'), offload=offload)
        trainer.adapters[(0, 0)].merged = True
        with pytest.raises(MergeStateError):
            trainer.train_step(np.ones((8, 12)), np.zeros(8, dtype=np.int64), 1)


def test_repeated_runs_give_identical_metrics(make_config, small_data):
    train, test = small_data
    config = make_config(interval=2, epochs=2, iterations=None)
    first = run_training(config, train, test_dataset=test).history
    second = run_training(config, train, test_dataset=test).history
    assert first == second
    assert all(record['wall_s'] is None for record in first)
    assert [record['split'] for record in first].count('test') == 2


@pytest.mark.parametrize('kind', ['lowrank', 'linear'])
def test_merged_evaluation_matches_unmerged(small_model, small_data, kind):
    _, test = small_data
    adapters = nonzero_adapters(small_model, kind)
    accuracy, loss = evaluate(small_model, adapters, test)
    merged_accuracy, merged_loss = evaluate(small_model, adapters, test, merged=True)
    assert merged_accuracy == accuracy
    assert merged_loss == pytest.approx(loss, abs=1e-10)


def test_separated_blobs_are_learned(make_config):
    config = make_config(
        model='linear', variant='full', classes=10, per_class=100, dims=20, separation=10.0, epochs=10, iterations=None
    )
    train = synth_dataset(10, 100, 20, 10.0, seed=0)
    test = synth_dataset(10, 50, 20, 10.0, seed=0, split='test')
    history = run_training(config, train, test_dataset=test).history
    assert history[-1]['split'] == 'test'
    assert history[-1]['accuracy'] >= 0.99


def test_indistinguishable_classes_stay_at_chance(make_config):
    config = make_config(
        model='linear', variant='full', classes=10, per_class=100, dims=20, separation=0.0, epochs=3, iterations=None
    )
    train = synth_dataset(10, 100, 20, 0.0, seed=0)
    test = synth_dataset(10, 200, 20, 0.0, seed=0, split='test')
    accuracy = run_training(config, train, test_dataset=test).history[-1]['accuracy']
    assert abs(accuracy - 0.1) <= 0.05


def test_invalid_config_values(make_config):
    with pytest.raises(ConfigError):
        make_config(variant='sideways')
    with pytest.raises(ConfigError):
        make_config(interval=0)
    with pytest.raises(ConfigError):
        make_config(iterations=0)
