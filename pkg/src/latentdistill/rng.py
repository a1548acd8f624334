"""Seeded random streams.

Every consumer draws from its own named substream of one master seed.  The
generator is numpy's PCG64 seeded through ``SeedSequence(seed,
spawn_key=(h,))`` where ``h`` is the first four bytes (little-endian) of the
SHA-256 digest of the stream name.  Streams with different names are
statistically independent; the same (seed, name) pair always yields the same
sequence on every platform numpy supports.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(_name_key(name),))
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(seed: int, name: str) -> int:
    """A derived 63-bit integer seed, for handing a stage its own master seed."""
    return int(substream(seed, name).integers(0, 2**63 - 1))
