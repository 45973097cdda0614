import json
import struct

import numpy as np
import pytest

from vlfa.checkpoint import MAGIC, Checkpoint, file_hash, load_checkpoint, save_checkpoint
from vlfa.config import RunConfig
from vlfa.errors import CheckpointFormatError, CheckpointIntegrityError, ConfigError


def sample_checkpoint():
    tensors = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "b.bias": np.ones(4, dtype=np.float32)}
    return Checkpoint("regressor", tensors, RunConfig().to_dict(), 0, "abc", RunConfig().hash(), {"losses": [1.0]})


def test_round_trip(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", sample_checkpoint())
    ckpt = load_checkpoint(path)
    assert ckpt.module == "regressor" and ckpt.config_hash == RunConfig().hash()
    assert np.array_equal(ckpt.tensors["a.weight"], np.arange(6).reshape(2, 3))
    assert ckpt.extra["losses"] == [1.0]
    data = path.read_bytes()
    assert data.startswith(MAGIC)
    n = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])[0]
    manifest = json.loads(data[len(MAGIC) + 8:len(MAGIC) + 8 + n])
    assert [t["name"] for t in manifest["tensors"]] == sorted(sample_checkpoint().tensors)
    assert file_hash(path) == file_hash(save_checkpoint(tmp_path / "again.ckpt", sample_checkpoint()))


def test_bad_magic(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", sample_checkpoint())
    data = bytearray(path.read_bytes())
    data[0:2] = b"XX"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(path)


def test_truncated_payload_names_the_tensor(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", sample_checkpoint())
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointIntegrityError, match="b.bias"):
        load_checkpoint(path)


def test_trailing_bytes_and_truncated_header(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", sample_checkpoint())
    good = path.read_bytes()
    path.write_bytes(good + b"\0\0\0\0")
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)
    path.write_bytes(good[:7])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"sede": 1})
    with pytest.raises(ConfigError, match="unknown keys in 'align'"):
        RunConfig.from_dict({"align": {"temperature": 0.1}})
    with pytest.raises(ConfigError, match="tau"):
        RunConfig.from_dict({"align": {"tau": -0.1}})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)


def test_config_hash_tracks_content():
    a, b = RunConfig(), RunConfig.from_dict({"seed": 0})
    assert a.hash() == b.hash() and len(a.hash()) == 16
    assert RunConfig.from_dict({"diffusion": {"sigma": 0.4}}).hash() != a.hash()
    assert RunConfig.from_dict(json.loads(a.to_json())).to_dict() == a.to_dict()
