"""Per-purpose random streams derived from one run seed.

Each consumer asks for ``rng_for(seed, label)``; the sub-seed is the first
8 bytes of ``sha256("<seed>:<label>")`` read as a little-endian integer, so
adding a new consumer never shifts the draws of an existing one.
"""
from __future__ import annotations

import hashlib

import numpy as np


def subseed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(subseed(seed, label))
