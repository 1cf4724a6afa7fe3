"""Deterministic RNG derivation.

Every stochastic operation in the package draws from a generator derived
from an explicit root seed plus a tuple of context tags (strings or
integers).  Generators are never shared or advanced across call sites, so
any point in a run can be reproduced from (seed, tags) alone and engine
snapshots only need to store counters, not RNG state.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence_for(root: int, *tags) -> np.random.SeedSequence:
    """SeedSequence for a (root seed, context tags) pair; stable across runs."""
    entropy = [int(root) & _MASK64] + [_tag_to_int(t) for t in tags]
    return np.random.SeedSequence(entropy)


def rng_for(root: int, *tags) -> np.random.Generator:
    """Fresh Generator for a (root seed, context tags) pair."""
    return np.random.default_rng(seed_sequence_for(root, *tags))
