import csv
import io
import json

import pytest

from cola.__main__ import main
from cola.helpers.checkpoint import load_checkpoint

SMALL_INI = """
[data]
dataset = synthetic
classes = 4
per_class = 20
test_per_class = 10
dims = 8
separation = 6.0

[model]
model = linear

[adapter]
adapter = lowrank
rank = 2

[train]
batch_size = 8
iterations = 10
interval = 2
variant = merged

[collaboration]
users = 2
mode = alone
"""


@pytest.fixture
def small_ini(tmp_path):
    path = tmp_path / 'small.ini'
    path.write_text(SMALL_INI)
    return str(path)


def test_verify_passes(tmp_path, capsys):
    report_path = tmp_path / 'verify.json'
    assert main(['verify', '--json', str(report_path)]) == 0
    assert 'Status: PASSED' in capsys.readouterr().out
    assert json.loads(report_path.read_text())['passed'] is True


def test_train_requires_a_config():
    with pytest.raises(SystemExit) as excinfo:
        main(['train'])
    assert excinfo.value.code == 2


def test_missing_config_file_exits_with_two(capsys):
    assert main(['train', '--config', '/no/such/config.ini']) == 2
    assert 'Error:' in capsys.readouterr().err


def test_train_writes_deterministic_metrics(tmp_path, small_ini):
    first, second = tmp_path / 'first.jsonl', tmp_path / 'second.jsonl'
    checkpoint = tmp_path / 'adapters.cola'
    assert main(['train', '--config', small_ini, '--output', str(first), '--checkpoint', str(checkpoint)]) == 0
    assert main(['train', '--config', small_ini, '--output', str(second)]) == 0
    assert first.read_bytes() == second.read_bytes()
    meta = json.loads((tmp_path / 'first.meta.json').read_text())
    assert meta['command'] == 'train'
    assert meta['presets'] == {'model': 'linear', 'adapter': 'lowrank', 'variant': 'merged', 'rank': 2}
    assert meta['seeds']['seed'] == 0
    assert sorted(load_checkpoint(checkpoint)) == [(0, 0)]


def test_train_prints_csv_without_output(small_ini, capsys):
    assert main(['train', '--config', small_ini, '--batch_size', '4']) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert rows[0]['split'] == 'train'
    assert rows[-1]['split'] == 'test'


def test_ftaas_alone_reports_merged_accuracy(tmp_path, small_ini):
    output = tmp_path / 'ftaas.jsonl'
    log = tmp_path / 'messages.jsonl'
    assert main(['ftaas', '--config', small_ini, '--output', str(output), '--message_log', str(log)]) == 0
    splits = {json.loads(line)['split'] for line in output.read_text().splitlines()}
    assert splits == {'train', 'test', 'test_merged'}
    assert log.read_text().strip()


def test_ftaas_rejects_unknown_mode(small_ini):
    with pytest.raises(SystemExit):
        main(['ftaas', '--config', small_ini, '--mode', 'solo'])


def cola_merged_learning_base(path):
    rows = list(csv.DictReader(path.open()))
    (row,) = [r for r in rows if (r['method'], r['merged'], r['mode']) == ('cola', 'True', 'learning')]
    return int(row['base'])


def test_cost_merged_base_is_independent_of_users(tmp_path, capsys):
    one, eight = tmp_path / 'one.csv', tmp_path / 'eight.csv'
    assert main(['cost', '--config', 'synthetic', '--users', '1', '--csv', str(one)]) == 0
    assert main(['cost', '--config', 'synthetic', '--users', '8', '--csv', str(eight)]) == 0
    assert 'ColA (merged)' in capsys.readouterr().out
    assert cola_merged_learning_base(one) == cola_merged_learning_base(eight)


def test_plot_filters_split(tmp_path, small_ini, capsys):
    metrics = tmp_path / 'run.jsonl'
    assert main(['train', '--config', small_ini, '--output', str(metrics)]) == 0
    capsys.readouterr()
    assert main(['plot', '--metrics', str(metrics), '--split', 'test']) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert rows and all(row['split'] == 'test' for row in rows)


def test_plot_of_missing_file_fails(tmp_path):
    assert main(['plot', '--metrics', str(tmp_path / 'missing.jsonl')]) == 1
