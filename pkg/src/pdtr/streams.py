"""Counter-based random streams.

Every stochastic routine in the package derives its generator from an
integer seed plus a tuple key, via Philox counters.  A stream is a pure
function of (seed, key), so replications can run in any order, on any
number of workers, and still consume identical randomness.
"""
from __future__ import annotations

import numpy as np

# Fixed purpose codes so unrelated draws never share a substream.
SIM = 1
SPLIT = 2
SIMPLEX = 3
TESTSET = 4
GRID = 5
PAIRS = 6


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return the Philox generator for (seed, *key)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key))))


def derive_seed(seed: int, *key: int) -> int:
    """Derive a plain integer seed for APIs that take one (e.g. split_even)."""
    return int(substream(seed, *key).integers(2**63))
