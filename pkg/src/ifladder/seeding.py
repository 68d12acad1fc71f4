"""Seed derivation.

All randomness goes through :func:`rng`, a Philox-4x64 counter-based
generator keyed by a SeedSequence hash of integer and string labels. Both
algorithms are specified by numpy and give identical streams on every
platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _as_word(part: int | str) -> int:
    if isinstance(part, str):
        return int.from_bytes(hashlib.sha256(part.encode()).digest()[:8], "little")
    if part < 0:
        raise ValueError(f"seed components must be non-negative, got {part}")
    return int(part) & _MASK64


def seed_sequence(*parts: int | str) -> np.random.SeedSequence:
    return np.random.SeedSequence([_as_word(p) for p in parts])


def rng(*parts: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(*parts)))


def derive_seed(*parts: int | str) -> int:
    """A 63-bit integer seed derived from ``parts``."""
    return int(seed_sequence(*parts).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
