"""Splittable seeding: every random stream in a run is derived from the one
64-bit run seed via hash(seed, purpose, counter), so any worker parallelism
or resume point reproduces the sequential run bit for bit.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def derive_seed(seed: int, purpose: str, counter: int = 0) -> int:
    """Collision-resistant 64-bit stream seed for (seed, purpose, counter)."""
    h = hashlib.sha256()
    h.update(struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF))
    h.update(purpose.encode("utf-8"))
    h.update(struct.pack("<q", counter))
    return struct.unpack("<Q", h.digest()[:8])[0]


def derived_rng(seed: int, purpose: str, counter: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, purpose, counter)))
