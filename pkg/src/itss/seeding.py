"""Seed derivation. All randomness flows from integer keys through
``numpy.random.SeedSequence`` into ``PCG64`` generators."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*keys) -> int:
    """Stable 63-bit integer seed from a tuple of non-negative integer keys."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def name_key(name: str) -> int:
    """Deterministic integer key for a string (no Python hash randomization)."""
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=7).digest(), "little")
