"""Named random streams derived from a single experiment seed.

Every source of randomness (data generation, parameter init, publication
noise, attacks) pulls from its own stream so runs are reproducible and
components stay independent of each other's draw order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for the sub-stream ``name`` of an experiment ``seed``."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    tag = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))
