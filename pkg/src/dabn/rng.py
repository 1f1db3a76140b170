"""Named random sub-streams derived from one 64-bit seed.

Every consumer (weights, shuffles, dropout, splits, ...) asks for its own
stream by name, so changing how much randomness one part draws never shifts
another part's sequence.
"""

import zlib

import numpy as np


def substream(seed: int, *names) -> np.random.Generator:
    """Generator keyed by ``seed`` and a path of names or integers."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for name in names:
        key.append(name if isinstance(name, int) else zlib.crc32(str(name).encode()))
    return np.random.default_rng(np.random.SeedSequence(key))
