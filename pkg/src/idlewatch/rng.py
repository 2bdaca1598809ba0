"""Counter-based random streams.

Every random draw in the package is keyed on (seed, *labels) so that
evaluation order never matters: removing a vehicle from a scene, or
rendering channels in parallel, leaves every other stream untouched.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _as_word(part) -> int:
    """Map a key part to a stable 64-bit word."""
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    if isinstance(part, str):
        digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"rng key parts must be int or str, got {type(part).__name__}")


def generator(seed: int, *parts) -> np.random.Generator:
    """Independent generator for the stream identified by (seed, *parts)."""
    entropy = [_as_word(seed)] + [_as_word(p) for p in parts]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def subseed(seed: int, *parts) -> int:
    """Derived 64-bit seed for handing to another module."""
    entropy = [_as_word(seed)] + [_as_word(p) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])
