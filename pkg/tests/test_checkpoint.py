import json

import numpy as np
import pytest

from conftest import tiny_config
from mhrnnt.checkpoint import FORMAT_VERSION, MAGIC, load_checkpoint, read_checkpoint, save_checkpoint
from mhrnnt.exceptions import CheckpointVersionMismatch, CorruptCheckpoint, DataFormatError, TruncatedCheckpoint
from mhrnnt.model import init_model


@pytest.fixture
def saved(tmp_path, tiny_model):
    return save_checkpoint(tiny_model, tmp_path / "m.ckpt", {"name": "base1", "history": [{"epoch": 1}]})


def test_round_trip_is_bit_exact(saved, tiny_model):
    ckpt = read_checkpoint(saved)
    assert ckpt.model == tiny_model
    assert ckpt.metadata == {"name": "base1", "history": [{"epoch": 1}]}
    assert ckpt.config == tiny_model.config


def test_same_model_same_bytes(tmp_path, tiny_model):
    a = save_checkpoint(tiny_model, tmp_path / "a.ckpt").read_bytes()
    b = save_checkpoint(init_model(tiny_model.config), tmp_path / "b.ckpt").read_bytes()
    assert a == b


def test_layout(saved, tiny_model):
    data = saved.read_bytes()
    assert data.startswith(MAGIC)
    end = data.index(b"\n", len(MAGIC))
    head = json.loads(data[len(MAGIC):end])
    assert head["format_version"] == FORMAT_VERSION
    assert [s["name"] for s in head["segments"]] == list(tiny_model.params)
    payload = np.frombuffer(data[end + 1:], dtype="<f8")
    assert np.array_equal(payload, tiny_model.flat())


def test_truncated(saved, tmp_path):
    data = saved.read_bytes()
    for cut in (len(data) - 1, len(data) // 2, 5):
        p = tmp_path / f"cut{cut}.ckpt"
        p.write_bytes(data[:cut])
        with pytest.raises(TruncatedCheckpoint):
            load_checkpoint(p)


def test_bit_flip_is_corrupt(saved):
    data = bytearray(saved.read_bytes())
    data[-4] ^= 0x10
    saved.write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(saved)


def test_trailing_garbage(saved):
    saved.write_bytes(saved.read_bytes() + b"\0" * 8)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(saved)


def test_version_mismatch(saved):
    data = saved.read_bytes().replace(b'"format_version": 1', b'"format_version": 2')
    saved.write_bytes(data)
    with pytest.raises(CheckpointVersionMismatch):
        load_checkpoint(saved)


def test_not_a_checkpoint(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"hello world, definitely not a checkpoint")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(p)


def test_errors_are_io_errors(tmp_path):
    assert issubclass(CorruptCheckpoint, DataFormatError) and issubclass(DataFormatError, OSError)
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_no_temp_file_left(saved):
    assert [p.name for p in saved.parent.iterdir()] == ["m.ckpt"]
