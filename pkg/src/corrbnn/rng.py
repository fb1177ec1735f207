"""Deterministic keyed random streams.

Every draw in training and prediction comes from a counter-based Philox
generator keyed by a hash of (seed, *labels), e.g. (seed, layer index,
parameter group, iteration).  The stream a consumer sees therefore depends
only on its key, never on how many draws other consumers made or in which
order they ran.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key128(seed: int, parts: tuple) -> np.ndarray:
    text = repr((int(seed),) + parts).encode()
    digest = hashlib.sha256(text).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64)


class KeyedRNG:
    """Factory of independent generators addressed by hashable labels."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, *parts) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=_key128(self.seed, parts)))

    def normal(self, size, *parts) -> np.ndarray:
        return self.generator(*parts).standard_normal(size)
