import logging

import numpy as np
import pytest
from conftest import nonzero_adapters

from cola.autodiff import Tape
from cola.collaboration import (
    as_user_adapters,
    merge_all,
    route_forward,
    routed_batches,
    run_collaboration,
    user_quotas,
    user_shards,
    user_view,
)
from cola.helpers.errors import ConfigError, NotMergeableError
from cola.router import RoutedBatch, Router
from cola.training import offloaded_records, run_training


def mixed_batch(n=9, users=3, seed=0):
    rng = np.random.default_rng(seed)
    owners = np.array([k % users for k in range(n)])
    return RoutedBatch(rng.normal(size=(n, 12)), rng.integers(0, 4, size=n), owners)


def test_routed_rows_match_isolated_users(small_model):
    adapters = nonzero_adapters(small_model, 'lowrank', users=3)
    batch = mixed_batch()
    logits = route_forward(small_model, adapters, batch).numpy()
    for k in range(3):
        rows = batch.owners == k
        isolated = small_model.forward(Tape(), batch.inputs[rows], user_view(adapters, k), tap=False).logits.numpy()
        np.testing.assert_allclose(logits[rows], isolated, atol=1e-10, rtol=0)


def test_route_forward_accepts_per_user_lists(small_model):
    adapters = nonzero_adapters(small_model, 'linear', users=2)
    lists = [[adapters[(m, k)] for m in range(small_model.M)] for k in range(2)]
    assert sorted(as_user_adapters(lists)) == sorted(adapters)
    batch = mixed_batch(users=2)
    np.testing.assert_array_equal(
        route_forward(small_model, lists, batch).numpy(), route_forward(small_model, adapters, batch).numpy()
    )


def test_route_forward_alpha_override(small_model):
    adapters = nonzero_adapters(small_model, 'linear', users=2)
    batch = mixed_batch(users=2)
    base = small_model.forward(Tape(), batch.inputs, tap=False).logits.numpy()
    np.testing.assert_allclose(route_forward(small_model, adapters, batch, alpha=0.0).numpy(), base)


def test_unmerged_records_match_isolated_records(small_model):
    adapters = nonzero_adapters(small_model, 'lowrank', users=3)
    batch = mixed_batch()
    router = Router(batch.owners, 3)
    _, _, records = offloaded_records(small_model, adapters, batch.inputs, batch.labels, 'unmerged', router=router)
    by_key = {(record.layer, record.user): record for record in records}
    for k in range(3):
        rows = batch.owners == k
        _, _, isolated = offloaded_records(
            small_model, user_view(adapters, k), batch.inputs[rows], batch.labels[rows], 'unmerged'
        )
        for record in isolated:
            shared = by_key[(record.layer, k)]
            np.testing.assert_array_equal(shared.hidden_input, record.hidden_input)
            np.testing.assert_allclose(shared.hidden_grad, record.hidden_grad, atol=1e-10, rtol=0)


def test_merge_all_sums_every_user(small_model):
    adapters = nonzero_adapters(small_model, 'lowrank', users=2)
    merged = merge_all(small_model, adapters)
    for m in range(small_model.M):
        expected = small_model.tuned_weight(m) + sum(adapters[(m, k)].dense() for k in range(2))
        np.testing.assert_allclose(merged.tuned_weight(m), expected, atol=1e-12)
    assert merged.parameter_hash() != small_model.parameter_hash()
    assert not any(adapter.merged for adapter in adapters.values())


def test_merge_all_rejects_mlp_adapters(small_model):
    with pytest.raises(NotMergeableError):
        merge_all(small_model, nonzero_adapters(small_model, 'mlp', users=2))


def test_user_shards_split_by_class(small_data):
    train, _ = small_data
    shards = user_shards(train, 3)
    assert sum(len(shard) for shard in shards) == len(train)
    for k, shard in enumerate(shards):
        assert set(np.unique(shard.labels) % 3) == {k}
    with pytest.raises(ConfigError):
        user_shards(train, 5)


def test_user_quotas():
    assert user_quotas(10, 4) == [3, 3, 2, 2]
    assert user_quotas(8, 1) == [8]
    with pytest.raises(ConfigError):
        user_quotas(2, 3)


def test_routed_batches_concatenate_quotas(small_data):
    train, _ = small_data
    shards = user_shards(train, 2)
    batches = list(routed_batches(shards, 7, seed=0, iterations=3))
    assert [t for t, _, _ in batches] == [1, 2, 3]
    for _, _, batch in batches:
        assert batch.owners.tolist() == [0, 0, 0, 0, 1, 1, 1]
        assert set(batch.labels[batch.owners == 0] % 2) == {0}


def test_single_user_collab_equals_merged_training(make_config, small_data):
    train, _ = small_data
    collab = run_collaboration(make_config(mode='collab', users=1, interval=2), train)
    merged = run_training(make_config(variant='merged', interval=2), train)
    assert collab.history == merged.history
    for key, adapter in merged.adapters.items():
        for name, value in adapter.params.items():
            assert collab.adapters[key].params[name].tobytes() == value.tobytes()


def test_collab_uses_one_backward_per_iteration(make_config, small_data):
    train, test = small_data
    result = run_collaboration(make_config(mode='collab', users=4, adapter='linear'), train, test_dataset=test)
    assert result.trainer.backward_count == 12
    assert result.trainer.merge_count == 12
    assert sorted({k for _, k in result.adapters}) == [0, 1, 2, 3]
    assert result.offload_report.conserved
    tests = [record for record in result.history if record['split'] == 'test']
    assert sorted({record['user'] for record in tests}) == [0, 1, 2, 3]


def test_alone_mode_reports_post_hoc_merge(make_config, small_data, caplog):
    train, test = small_data
    with caplog.at_level(logging.WARNING, logger='cola.collaboration'):
        result = run_collaboration(make_config(mode='alone', users=2), train, test_dataset=test)
    assert result.trainer.merge_count == 0
    assert result.post_hoc_alpha == 1.0
    merged_lines = [record for record in result.history if record['split'] == 'test_merged']
    assert [record['user'] for record in merged_lines] == [0, 1]
    assert all(record['alpha'] == 1.0 for record in merged_lines)
    assert any('alpha=1.0' in message for message in caplog.messages)


def test_joint_mode_trains_one_adapter_set(make_config, small_data):
    train, test = small_data
    result = run_collaboration(make_config(mode='joint', users=2, variant='unmerged'), train, test_dataset=test)
    assert {k for _, k in result.adapters} == {0}
    assert result.trainer.merge_count == 0
    assert {record['user'] for record in result.history if record['split'] == 'test'} == {0, 1}


def test_collab_rejects_mlp_adapters(make_config, small_data):
    train, _ = small_data
    with pytest.raises(NotMergeableError):
        run_collaboration(make_config(mode='collab', users=2, adapter='mlp', adapter_hidden=4), train)


def test_joint_mode_needs_an_offloaded_variant(make_config, small_data):
    train, _ = small_data
    with pytest.raises(ConfigError):
        run_collaboration(make_config(mode='joint', users=2, variant='classical'), train)
