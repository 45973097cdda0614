"""Named random substreams derived from one root seed."""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *ids: int) -> np.random.Generator:
    """Independent generator for (seed, name, ids...); stable across runs and platforms."""
    return np.random.default_rng([int(seed), stream_key(name), *map(int, ids)])
