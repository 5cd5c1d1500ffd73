"""Seed-derived random streams.

Every consumer asks for a stream by (seed, purpose, index...). Streams are
independent of the order in which they are requested, so a batch or page can
be simulated in isolation and still reproduce the same draws.
"""
import zlib

import numpy as np


def _tag(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key)


def stream(seed: int, *keys) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF] + [_tag(k) & 0xFFFFFFFF for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
