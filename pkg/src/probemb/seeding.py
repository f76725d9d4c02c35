"""Seeded random streams.

All randomness goes through a counter-based Philox generator keyed by the
user seed, so a (seed, stream) pair fully determines the draws.
"""

import numpy as np


def rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator for ``stream`` of ``seed``; distinct streams never overlap."""
    bitgen = np.random.Philox(key=int(seed) & (2 ** 64 - 1))
    if stream:
        bitgen = bitgen.jumped(int(stream))
    return np.random.Generator(bitgen)
