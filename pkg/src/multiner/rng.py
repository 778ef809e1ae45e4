"""Named, seed-derived random streams.

Every consumer of randomness (init, shuffle, dropout, synthetic data) gets
its own PCG64 generator derived from the run seed and a stream name, so
ablations that share parameter shapes also share initial values.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    if seed is None:
        raise ValueError("a seed is required")
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))
