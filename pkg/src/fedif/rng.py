"""Named random streams.

Every random draw in a simulation comes from a stream keyed by
``(master seed, purpose, client id, round)``. Streams are independent of the
order in which they are requested, so running client work in parallel (or in a
different order) cannot change results.
"""
from __future__ import annotations

import zlib

import numpy as np

GLOBAL = -1


def stream_key(seed: int, name: str, client: int = GLOBAL, round_: int = 0) -> list[int]:
    # SeedSequence entropy must be non-negative
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode()), client + 1, round_]


def stream(seed: int, name: str, client: int = GLOBAL, round_: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(stream_key(seed, name, client, round_)))


def as_generator(seed) -> np.random.Generator:
    """Accept an int seed, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
