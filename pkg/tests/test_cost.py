import pytest

from cola.adapters import AdapterSpec
from cola.cost import BASE, OFFLOAD, category_sizes, cost_report, cost_table, cost_table_csv, format_cost_table
from cola.helpers.errors import ConfigError, DimensionError
from cola.models import build_model


@pytest.fixture
def mlp_model():
    return build_model('mlp', seed=0, in_dim=784, out_dim=10, hidden=(128, 128))


def specs_for(model, kind, rank=8, hidden=32):
    return [AdapterSpec(kind, *model.layer_dims(m), rank=rank, hidden=hidden) for m in range(model.M)]


def test_linear_model_sizes():
    model = build_model('linear')
    sizes = category_sizes(model, specs_for(model, 'linear'), users=1, batch_size=4)
    assert sizes['theta'] == sizes['grad_theta'] == 7850
    assert sizes['w'] == sizes['grad_w'] == 7840
    assert sizes['h'] == sizes['grad_h'] == 40
    assert sizes['h_tilde'] == 40


def test_adapter_parameters_scale_with_users(mlp_model):
    specs = specs_for(mlp_model, 'lowrank')
    one = category_sizes(mlp_model, specs, users=1, batch_size=16)
    eight = category_sizes(mlp_model, specs, users=8, batch_size=16)
    assert eight['w'] == 8 * one['w']
    assert eight['h_tilde'] == one['h_tilde']
    assert eight['theta'] == one['theta']


@pytest.mark.parametrize('kind', ['lowrank', 'linear', 'mlp'])
def test_merged_cola_base_cost_ignores_users_and_adapter(mlp_model, kind):
    specs = specs_for(mlp_model, kind)
    sizes = category_sizes(mlp_model, specs, users=1, batch_size=32)
    expected = sizes['h'] + sizes['theta'] + sizes['grad_h']
    for users in (1, 8):
        report = cost_report(mlp_model, specs, users, 'cola', True, 'learning', 32)
        assert report.base_total == expected


@pytest.mark.parametrize('users', [1, 8])
def test_unmerged_cola_saves_adapter_gradients(mlp_model, users):
    specs = specs_for(mlp_model, 'lowrank')
    cola = cost_report(mlp_model, specs, users, 'cola', False, 'learning', 32)
    peft = cost_report(mlp_model, specs, users, 'peft', False, 'learning', 32)
    assert cola.base_total - peft.base_total == -cola.entries['grad_w'].count
    assert cola.offload_total == cola.entries['grad_w'].count


def test_full_fine_tuning_learning_cost(mlp_model):
    specs = specs_for(mlp_model, 'lowrank')
    sizes = category_sizes(mlp_model, specs, users=1, batch_size=8)
    report = cost_report(mlp_model, specs, 1, 'ft', True, 'learning', 8)
    assert not report.merged
    assert report.base_total == 2 * sizes['h'] + 2 * sizes['theta']
    assert report.offload_total == 0


def test_merged_peft_learns_like_unmerged(mlp_model):
    specs = specs_for(mlp_model, 'linear')
    merged = cost_report(mlp_model, specs, 2, 'peft', True, 'learning', 8)
    unmerged = cost_report(mlp_model, specs, 2, 'peft', False, 'learning', 8)
    assert merged.base_total == unmerged.base_total


def test_offloaded_cells_are_braced(mlp_model):
    report = cost_report(mlp_model, specs_for(mlp_model, 'lowrank'), 1, 'cola', True, 'learning', 8)
    assert report.entries['w'].device == OFFLOAD
    assert report.entries['h'].device == BASE
    assert report.entries['w'].cell() == f"{{{report.entries['w'].count}}}"
    assert report.entries['grad_theta'].cell() == '-'
    assert report.as_row()['h'] == str(report.entries['h'].count)


def test_table_has_every_row(mlp_model):
    reports = cost_table(mlp_model, specs_for(mlp_model, 'lowrank'), 1, 8)
    assert len(reports) == 9
    text = format_cost_table(reports)
    lines = text.splitlines()
    assert lines[0].split()[:2] == ['method', 'mode']
    assert len(lines) == 11
    assert 'ColA (merged)' in text
    assert '{' in lines[-1]


def test_cost_csv_columns(mlp_model):
    reports = cost_table(mlp_model, specs_for(mlp_model, 'lowrank'), 2, 8)
    lines = cost_table_csv(reports).splitlines()
    header = lines[0].split(',')
    assert header[:5] == ['method', 'merged', 'mode', 'users', 'batch_size']
    assert header[-2:] == ['base', 'offload']
    assert len(lines) == 10
    assert lines[-1].startswith('cola,True,learning,2,8')


def test_invalid_cost_requests(mlp_model):
    specs = specs_for(mlp_model, 'lowrank')
    with pytest.raises(DimensionError):
        category_sizes(mlp_model, specs[:2], users=1, batch_size=1)
    with pytest.raises(DimensionError):
        category_sizes(mlp_model, list(reversed(specs)), users=1, batch_size=1)
    with pytest.raises(ConfigError):
        cost_report(mlp_model, specs, 1, 'adapterdrop', False, 'learning', 8)
    with pytest.raises(ConfigError):
        cost_report(mlp_model, specs, 0, 'cola', False, 'learning', 8)
