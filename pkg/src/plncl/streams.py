"""Deterministic RNG streams keyed by (seed, site, block, iteration).

Every stochastic step of the samplers draws from its own generator, derived
from the master seed and the step's coordinates.  Results are therefore
independent of execution order and of how work is spread across workers.
The full-likelihood loop uses block index 0, so a single-block composite
design consumes exactly the same streams.
"""

from __future__ import annotations

import numpy as np


def substream(master_seed: int, *key: int) -> np.random.Generator:
    entropy = [int(master_seed)] + [int(part) for part in key]
    if any(part < 0 for part in entropy):
        raise ValueError("stream keys must be nonnegative")
    return np.random.default_rng(np.random.SeedSequence(entropy))
