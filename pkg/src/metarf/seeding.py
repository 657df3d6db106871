"""Seed derivation.

Every random stream in the package is a numpy ``Generator`` backed by PCG64.
A single integer seed fans out into independent component seeds through
``SeedSequence`` keyed by a stable CRC32 of the component label, so a run is
reproduced by one integer and adding a new component never shifts the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    """Return a 63-bit child seed for ``label`` under the root ``seed``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(label.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 generator seeded by ``(seed, *keys)``."""
    return np.random.Generator(np.random.PCG64([int(seed), *map(int, keys)]))
