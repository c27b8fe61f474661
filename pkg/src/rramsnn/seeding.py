"""Deterministic random streams keyed by (seed, purpose, index...).

Every consumer derives its own generator from the experiment seed plus a
tuple of string/int keys, so results never depend on call order or on how
work is split across processes.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` and the purpose ``keys``."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))
