"""Seed splitting.

Every random draw in the package comes from a generator derived from one
master seed plus a tuple of keys::

    derive_rng(seed, "program", 3)  ->  Generator(PCG64(SeedSequence(seed, spawn_key=(k1, k2))))

String keys are mapped to integers with CRC-32, so ``derive_rng(7, "read", 12)``
is the same stream on every platform and every run. Distinct key tuples give
statistically independent streams (this is what ``SeedSequence.spawn`` does
internally), which lets experiments re-run any single stage in isolation.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError("integer stream keys must be non-negative")
    return k


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in keys))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Return the generator for substream ``keys`` of master ``seed``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def derive_seed(seed: int, *keys) -> int:
    """Return a 64-bit integer seed for substream ``keys``.

    Useful where a child object wants its own master seed (e.g. one
    encoding per cohort in the gene-network experiment).
    """
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0])
