import hashlib
import struct

import numpy as np
import pytest
from conftest import nonzero_adapters

from cola.helpers.checkpoint import (
    MAGIC,
    VERSION,
    decode_tensors,
    dumps_adapters,
    encode_tensors,
    load_checkpoint,
    save_checkpoint,
)
from cola.helpers.errors import BadMagicError, CheckpointVersionError, TruncatedFileError


@pytest.mark.parametrize('kind', ['lowrank', 'linear', 'mlp'])
def test_save_load_round_trip_is_bit_exact(tmp_path, small_model, kind):
    adapters = nonzero_adapters(small_model, kind, users=2)
    path = save_checkpoint(adapters, tmp_path / 'adapters.cola')
    loaded = load_checkpoint(path)
    assert sorted(loaded) == sorted(adapters)
    for key, adapter in adapters.items():
        assert loaded[key].kind == kind
        assert loaded[key].alpha == adapter.alpha
        for name, value in adapter.params.items():
            assert loaded[key].params[name].tobytes() == value.tobytes()
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    assert hashlib.sha256(dumps_adapters(loaded)).hexdigest() == digest


def test_empty_adapter_set_is_a_valid_file(tmp_path):
    path = save_checkpoint({}, tmp_path / 'empty.cola')
    assert path.read_bytes() == MAGIC + struct.pack('<II', VERSION, 0)
    assert load_checkpoint(path) == {}


def test_byte_layout():
    data = encode_tensors([('w', np.array([[1.0, 2.0]], dtype=np.float32))])
    assert data[:4] == b"COLA"
    assert struct.unpack('<II', data[4:12]) == (VERSION, 1)
    assert struct.unpack('<I', data[12:16]) == (1,)
    assert data[16:17] == b"w"
    assert struct.unpack('<BI', data[17:22]) == (0, 2)
    assert struct.unpack('<2Q', data[22:38]) == (1, 2)
    assert np.frombuffer(data[38:], dtype='<f4').tolist() == [1.0, 2.0]


def test_float32_survives_round_trip():
    ((name, array),) = decode_tensors(encode_tensors([('x', np.arange(3, dtype=np.float32))]))
    assert name == 'x'
    assert array.dtype == np.float32


def test_bad_magic():
    with pytest.raises(BadMagicError):
        decode_tensors(b"NOPE" + struct.pack('<II', VERSION, 0))


def test_version_bump_is_rejected():
    with pytest.raises(CheckpointVersionError, match="version 2"):
        decode_tensors(MAGIC + struct.pack('<II', VERSION + 1, 0))


def test_truncated_file():
    data = encode_tensors([('w', np.ones(4))])
    with pytest.raises(TruncatedFileError):
        decode_tensors(data[:-3])
