import re
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from ..adapters import Adapter
from .errors import BadMagicError, CheckpointVersionError, TruncatedFileError

# Byte layout (little endian):
# b"COLA" | u32 version | u32 tensor count
# per tensor: u32 name length | name (utf-8) | u8 dtype (0=f32, 1=f64) | u32 ndim | u64 dims[ndim] | raw data
MAGIC = b"COLA"
VERSION = 1

_DTYPE_CODES = {np.dtype('<f4'): 0, np.dtype('<f8'): 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}
_NAME_PATTERN = re.compile(r"^layer(\d+)\.user(\d+)\.(\w+)\.(\w+)$")


def encode_tensors(tensors: List[Tuple[str, np.ndarray]]) -> bytes:
    """Serialize named float arrays into the checkpoint byte format."""
    chunks = [MAGIC, struct.pack('<II', VERSION, len(tensors))]
    for name, array in tensors:
        dtype = np.dtype(array.dtype).newbyteorder('<')
        if dtype not in _DTYPE_CODES:
            raise ValueError(f"Tensor '{name}' has unsupported dtype {array.dtype}.")
        encoded_name = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack('<BI', _DTYPE_CODES[dtype], array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}Q', *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise TruncatedFileError(f"Checkpoint ends at byte {len(self.data)}, expected {self.offset + size}.")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensors(data: bytes) -> List[Tuple[str, np.ndarray]]:
    """
    Parse the checkpoint byte format.

    Raises:
        BadMagicError: If the data does not start with b"COLA".
        CheckpointVersionError: If the version is not supported.
        TruncatedFileError: If the data ends early.
    """
    reader = _Reader(data)
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise BadMagicError(MAGIC, magic)
    version, count = reader.unpack('<II')
    if version != VERSION:
        raise CheckpointVersionError(f"Checkpoint version {version} is not supported (expected {VERSION}).")
    tensors = []
    for _ in range(count):
        (name_length,) = reader.unpack('<I')
        name = reader.take(name_length).decode('utf-8')
        code, ndim = reader.unpack('<BI')
        if code not in _CODE_DTYPES:
            raise ValueError(f"Tensor '{name}' has unknown dtype code {code}.")
        dims = reader.unpack(f'<{ndim}Q')
        dtype = _CODE_DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        array = np.frombuffer(reader.take(size), dtype=dtype).reshape(dims).astype(dtype.newbyteorder('='))
        tensors.append((name, array))
    return tensors


def dumps_adapters(adapters: Dict[Tuple[int, int], Adapter]) -> bytes:
    """Serialize {(m, k): Adapter}; each adapter stores its parameters plus a one-element alpha tensor."""
    tensors = []
    for (layer, user) in sorted(adapters):
        adapter = adapters[(layer, user)]
        prefix = f"layer{layer}.user{user}.{adapter.kind}"
        for name in sorted(adapter.params):
            tensors.append((f"{prefix}.{name}", adapter.params[name]))
        dtype = next(iter(adapter.params.values())).dtype
        tensors.append((f"{prefix}.alpha", np.array([adapter.alpha], dtype=dtype)))
    return encode_tensors(tensors)


def loads_adapters(data: bytes) -> Dict[Tuple[int, int], Adapter]:
    """Rebuild {(m, k): Adapter} from `dumps_adapters` output."""
    grouped: Dict[Tuple[int, int, str], Dict[str, np.ndarray]] = {}
    for name, array in decode_tensors(data):
        match = _NAME_PATTERN.match(name)
        if match is None:
            raise ValueError(f"Unexpected tensor name '{name}' in adapter checkpoint.")
        layer, user, kind, param = match.groups()
        grouped.setdefault((int(layer), int(user), kind), {})[param] = array
    adapters = {}
    for (layer, user, kind), params in grouped.items():
        alpha = float(params.pop('alpha')[0])
        adapters[(layer, user)] = Adapter.from_parameters(kind, params, alpha=alpha)
    return adapters


def save_checkpoint(adapters: Dict[Tuple[int, int], Adapter], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_adapters(adapters))
    return path


def load_checkpoint(path) -> Dict[Tuple[int, int], Adapter]:
    return loads_adapters(Path(path).read_bytes())
