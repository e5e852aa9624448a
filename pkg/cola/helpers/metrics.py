import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from .. import __version__

METRIC_FIELDS = ['iter', 'epoch', 'split', 'loss', 'accuracy', 'wall_s']


def meta_path_for(path) -> Path:
    """Companion metadata path of a metrics file: runs/a.jsonl -> runs/a.meta.json."""
    path = Path(path)
    return path.with_name(f"{path.stem}.meta.json")


@dataclass
class RunMetadata:
    """Self-description written next to every metrics file."""

    command: str
    config: Dict[str, object]
    seeds: Dict[str, int]
    precision: str
    version: str = __version__
    presets: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


class MetricsWriter:
    """
    Append metrics lines {iter, epoch, split, loss, accuracy, wall_s} to a JSON-lines file.

    `wall_s` is the time since the writer was created when `record_wall_time` is set and
    null otherwise, so repeated runs produce identical files.
    """

    def __init__(self, path=None, record_wall_time: bool = False) -> None:
        self.path = None if path is None else Path(path)
        self.record_wall_time = record_wall_time
        self.records: List[Dict[str, object]] = []
        self._start = time.perf_counter()
        self._file = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = self.path.open('w')

    def write(self, iteration: int, epoch: int, split: str, loss: float, accuracy: float, **extra) -> Dict[str, object]:
        wall_s = round(time.perf_counter() - self._start, 6) if self.record_wall_time else None
        record = {
            'iter': iteration,
            'epoch': epoch,
            'split': split,
            'loss': float(loss),
            'accuracy': float(accuracy),
            'wall_s': wall_s,
        }
        record.update(extra)
        self.records.append(record)
        if self._file is not None:
            self._file.write(json.dumps(record) + "\n")
            self._file.flush()
        return record

    def write_metadata(self, metadata: RunMetadata) -> Optional[Path]:
        if self.path is None:
            return None
        return metadata.write(meta_path_for(self.path))

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path) -> List[Dict[str, object]]:
    """
    Read a metrics JSON-lines file.

    Raises:
        ValueError: If a line is not a JSON object with the metric fields.
    """
    records = []
    with Path(path).open() as file:
        for number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            if not isinstance(record, dict) or any(key not in record for key in METRIC_FIELDS):
                raise ValueError(f"Line {number} of '{path}' is not a metrics record.")
            records.append(record)
    return records


def metrics_to_csv(records: List[Dict[str, object]], split: Optional[str] = None) -> str:
    """Render metrics records as CSV learning-curve data, optionally keeping a single split."""
    extra = sorted({key for record in records for key in record} - set(METRIC_FIELDS))
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=METRIC_FIELDS + extra, lineterminator="\n")
    writer.writeheader()
    for record in records:
        if split is None or record['split'] == split:
            writer.writerow({key: '' if record.get(key) is None else record.get(key) for key in METRIC_FIELDS + extra})
    return buffer.getvalue()
