"""Seeded, splittable random streams.

Every stochastic operation takes an explicit seed.  Child streams are derived
by hashing the parent seed together with a tuple of keys, so a work item
keyed by its parameters draws the same numbers no matter which worker runs
it or in which order.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np


def derive_seed(seed, *keys) -> int:
    """Stable 64-bit sub-seed for ``(seed, *keys)``."""
    payload = json.dumps([seed, *keys], sort_keys=True, default=str).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def make_rng(seed, *keys) -> np.random.Generator:
    """Counter-based Philox generator for ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, *keys)))


def digest(obj) -> str:
    """Short hex digest of a JSON-serializable object (parameter keys, configs)."""
    payload = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.blake2b(payload, digest_size=8).hexdigest()
