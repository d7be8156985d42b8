"""Seed-derived random streams.

Every consumer of randomness asks for a named substream of the root seed,
optionally keyed further (SNR index, direction index, trial...). Streams are
independent of evaluation order, so parallel work stays reproducible.
"""

import zlib

import numpy as np


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(stream_id(name),) + tuple(int(k) for k in keys))
    return np.random.default_rng(ss)
