"""Single-file checkpoints: magic, length-prefixed JSON manifest, float32 payload.

Layout: b"VLFA1" | uint64 little-endian manifest length | manifest (UTF-8 JSON) |
tensor blobs (little-endian float32) concatenated in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, CheckpointIntegrityError

MAGIC = b"VLFA1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    module: str
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    seed: int = 0
    corpus_hash: str = ""
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        entries, offset = [], 0
        for name, arr in self.tensors.items():
            shape = list(np.shape(arr))
            n = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
            entries.append({"name": name, "shape": shape, "offset": offset, "nbytes": n})
            offset += n
        return {"format": FORMAT_VERSION, "module": self.module, "tensors": entries, "config": self.config,
                "seed": int(self.seed), "corpus_hash": self.corpus_hash, "config_hash": self.config_hash,
                "extra": self.extra}


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    header = json.dumps(ckpt.manifest(), sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(header)))
        fh.write(header)
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    start = len(MAGIC) + _LEN.size
    if len(data) < start:
        raise CheckpointFormatError(f"{path}: truncated header")
    (n,) = _LEN.unpack_from(data, len(MAGIC))
    if start + n > len(data):
        raise CheckpointFormatError(f"{path}: manifest length {n} exceeds file size")
    try:
        manifest = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format {manifest.get('format')!r}")
    payload = memoryview(data)[start + n:]
    tensors, expected = {}, 0
    for entry in manifest["tensors"]:
        name, shape, offset, nbytes = entry["name"], entry["shape"], entry["offset"], entry["nbytes"]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize or offset != expected:
            raise CheckpointIntegrityError(f"{path}: tensor {name!r} has inconsistent shape or offset")
        if offset + nbytes > len(payload):
            raise CheckpointIntegrityError(f"{path}: payload truncated inside tensor {name!r}")
        tensors[name] = np.frombuffer(payload[offset:offset + nbytes], dtype=_DTYPE).reshape(shape).copy()
        expected = offset + nbytes
    if expected != len(payload):
        raise CheckpointIntegrityError(f"{path}: {len(payload) - expected} trailing payload bytes")
    return Checkpoint(manifest["module"], tensors, manifest.get("config", {}), manifest.get("seed", 0),
                      manifest.get("corpus_hash", ""), manifest.get("config_hash", ""), manifest.get("extra", {}))


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
