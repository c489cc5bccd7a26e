"""Deterministic RNG derivation: one global seed, per-stage streams."""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def derive_seed_sequence(seed: int, *tags: object) -> np.random.SeedSequence:
    """Derive an independent SeedSequence from a global seed and stage tags.

    Tags are hashed, so distinct tag tuples give statistically independent
    streams while remaining stable across runs and platforms.
    """
    digest = hashlib.sha256("/".join(str(t) for t in tags).encode("utf-8")).digest()
    words = struct.unpack("<4I", digest[:16])
    return np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *words])


def derive_rng(seed: int, *tags: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(seed, *tags))


def unit_fraction(seed: int, *tags: object) -> float:
    """Stable hash of (seed, tags) mapped into [0, 1). Used for split assignment."""
    digest = hashlib.sha256(
        ("%d/" % seed + "/".join(str(t) for t in tags)).encode("utf-8")
    ).digest()
    (value,) = struct.unpack("<Q", digest[:8])
    return value / 2**64
