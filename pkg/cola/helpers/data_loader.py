import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import BadMagicError, ConfigError, DimensionError, TruncatedFileError

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}


@dataclass
class DatasetHandle:
    name: str
    inputs: np.ndarray
    labels: np.ndarray
    split: str = 'train'
    n_classes: int = 10

    def __post_init__(self) -> None:
        if self.inputs.shape[0] == 0:
            raise DimensionError(f"Dataset '{self.name}' is empty.")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DimensionError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels.")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DimensionError(f"Labels of '{self.name}' fall outside [0, {self.n_classes}).")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def in_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, rows: np.ndarray, name: Optional[str] = None) -> "DatasetHandle":
        return DatasetHandle(name or self.name, self.inputs[rows], self.labels[rows], self.split, self.n_classes)

    def astype(self, dtype) -> "DatasetHandle":
        return DatasetHandle(self.name, self.inputs.astype(dtype), self.labels, self.split, self.n_classes)


def _read_idx(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == '.gz' else open
    with opener(path, 'rb') as file:
        return file.read()


def _header(data: bytes, n_fields: int, expected_magic: int, path) -> Tuple[int, ...]:
    # i32 magic | i32 dims[...], big endian
    if len(data) < 4 * n_fields:
        raise TruncatedFileError(f"IDX file '{path}' is shorter than its header.")
    fields = struct.unpack(f'>{n_fields}I', data[: 4 * n_fields])
    if fields[0] != expected_magic:
        raise BadMagicError(f"0x{expected_magic:08x}", f"0x{fields[0]:08x}")
    return fields[1:]


def load_mnist_idx(images_path, labels_path, split: str = 'train') -> DatasetHandle:
    """
    Read an MNIST image/label IDX pair (optionally gzip-compressed).

    Args:
        images_path: Path to the idx3 image file.
        labels_path: Path to the idx1 label file.
        split (str): Split tag stored on the handle.

    Returns:
        DatasetHandle: Images flattened to [N x rows*cols] and scaled by 1/255.

    Raises:
        BadMagicError: If a file does not start with the IDX magic number for its type.
        TruncatedFileError: If a file is shorter than its header says.
        DimensionError: If the image and label counts differ.
    """
    image_data = _read_idx(images_path)
    count, rows, cols = _header(image_data, 4, MNIST_IMAGE_MAGIC, images_path)
    pixels = image_data[16:]
    if len(pixels) < count * rows * cols:
        raise TruncatedFileError(f"IDX file '{images_path}' holds {len(pixels)} of {count * rows * cols} pixels.")
    images = np.frombuffer(pixels, dtype=np.uint8, count=count * rows * cols).reshape(count, rows * cols)

    label_data = _read_idx(labels_path)
    (label_count,) = _header(label_data, 2, MNIST_LABEL_MAGIC, labels_path)
    if len(label_data) - 8 < label_count:
        raise TruncatedFileError(f"IDX file '{labels_path}' holds {len(label_data) - 8} of {label_count} labels.")
    labels = np.frombuffer(label_data[8:], dtype=np.uint8, count=label_count).astype(np.int64)

    if count != label_count:
        raise DimensionError(f"{count} images but {label_count} labels.")
    return DatasetHandle('mnist', images.astype(np.float64) / 255.0, labels, split, 10)


def find_mnist(data_dir, split: str) -> DatasetHandle:
    """Load the canonical MNIST file pair of a split from a directory, with or without .gz suffixes."""
    images_name, labels_name = MNIST_FILES[split]
    for suffix in ('', '.gz'):
        images_path = Path(data_dir, images_name + suffix)
        labels_path = Path(data_dir, labels_name + suffix)
        if images_path.exists() and labels_path.exists():
            return load_mnist_idx(images_path, labels_path, split)
    raise FileNotFoundError(f"MNIST {split} files not found in '{data_dir}'.")


def synth_dataset(
    classes: int, per_class: int, dims: int, separation: float, seed: int, split: str = 'train'
) -> DatasetHandle:
    """
    Gaussian blobs with unit noise; class means sit at pairwise distance `separation`.

    Means are separation/√2 times orthonormal directions (random unit directions when
    dims < classes). Means depend only on the seed; the samples also depend on the split,
    so train and test share classes but not points.

    Raises:
        ConfigError: If classes, per_class or dims is below 1.
    """
    if classes < 1 or per_class < 1 or dims < 1:
        raise ConfigError("Synthetic data needs classes, per_class and dims of at least 1.")
    rng = np.random.default_rng(seed)
    if dims >= classes:
        directions, _ = np.linalg.qr(rng.normal(size=(dims, classes)))
        directions = directions.T
    else:
        directions = rng.normal(size=(classes, dims))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * separation / np.sqrt(2.0)

    split_offset = {'train': 0, 'test': 1}.get(split, 2)
    sample_rng = np.random.default_rng([seed, split_offset])
    labels = np.repeat(np.arange(classes), per_class)
    inputs = means[labels] + sample_rng.normal(size=(labels.size, dims))
    order = sample_rng.permutation(labels.size)
    return DatasetHandle('synthetic', inputs[order], labels[order], split, classes)


def iterate_batches(
    n: int, batch_size: int, seed: int, iterations: int
) -> Iterator[Tuple[int, int, np.ndarray]]:
    """
    Yield (iteration t from 1, epoch from 0, row indices) for `iterations` batches.

    Each epoch reshuffles with a generator seeded by (seed, epoch); the last batch of an
    epoch may be short. The permutation does not depend on the batch size, so a run with
    batch B·I sees the concatenation of I consecutive batches of a run with batch B.
    """
    per_epoch = -(-n // batch_size)
    t = 0
    epoch = 0
    while t < iterations:
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for start in range(0, per_epoch * batch_size, batch_size):
            if t >= iterations:
                return
            t += 1
            yield t, epoch, order[start : start + batch_size]
        epoch += 1
