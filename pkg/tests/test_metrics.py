import json

import pytest

from cola.helpers.metrics import METRIC_FIELDS, MetricsWriter, RunMetadata, meta_path_for, metrics_to_csv, read_metrics


def test_writer_lines_and_null_wall_time(tmp_path):
    path = tmp_path / 'runs' / 'a.jsonl'
    with MetricsWriter(path) as writer:
        writer.write(1, 0, 'train', 1.5, 0.25)
        writer.write(2, 0, 'test', 1.25, 0.5, user=1)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert lines[0] == {'iter': 1, 'epoch': 0, 'split': 'train', 'loss': 1.5, 'accuracy': 0.25, 'wall_s': None}
    assert lines[1]['user'] == 1
    assert read_metrics(path) == lines


def test_wall_time_when_requested():
    writer = MetricsWriter(record_wall_time=True)
    record = writer.write(1, 0, 'train', 0.0, 1.0)
    assert record['wall_s'] >= 0.0
    assert writer.records == [record]


def test_metadata_sits_next_to_metrics(tmp_path):
    path = tmp_path / 'run.jsonl'
    metadata = RunMetadata(command='train', config={'seed': 3}, seeds={'seed': 3}, precision='float64')
    with MetricsWriter(path) as writer:
        meta = writer.write_metadata(metadata)
    assert meta == meta_path_for(path) == tmp_path / 'run.meta.json'
    content = json.loads(meta.read_text())
    assert content['command'] == 'train'
    assert content['version']
    assert MetricsWriter().write_metadata(metadata) is None


def test_read_metrics_rejects_foreign_lines(tmp_path):
    path = tmp_path / 'bad.jsonl'
    path.write_text('{"iter": 1}\n')
    with pytest.raises(ValueError):
        read_metrics(path)


def test_csv_filters_split_and_keeps_extra_columns():
    records = [
        {'iter': 1, 'epoch': 0, 'split': 'train', 'loss': 2.0, 'accuracy': 0.1, 'wall_s': None},
        {'iter': 1, 'epoch': 0, 'split': 'test', 'loss': 1.0, 'accuracy': 0.5, 'wall_s': None, 'user': 0},
    ]
    lines = metrics_to_csv(records).splitlines()
    assert lines[0].split(',') == METRIC_FIELDS + ['user']
    assert lines[1] == '1,0,train,2.0,0.1,,'
    test_only = metrics_to_csv(records, split='test').splitlines()
    assert test_only[1:] == ['1,0,test,1.0,0.5,,0']
