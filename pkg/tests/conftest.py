import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from pdtr import GenerativeModel, MCConfig, run_mc

# Acceptance runs at the specified scale by default; PDTR_ACCEPT_REPS
# exists for quick development iterations only.
ACCEPT_REPS = int(os.environ.get("PDTR_ACCEPT_REPS", "200"))
ACCEPT_SEED = 20240915
METHODS = ("prioritized", "qlearn_per_outcome", "composite_average", "tuned_composite")


@pytest.fixture(scope="session")
def mc_results():
    """One 200-replication study per design, shared by criteria 1-3.

    Replications are counter-based in the index, so the first 100 of a
    200-replication run are identical to a standalone 100-replication run
    with the same seed.
    """
    out = {}
    for design in ("s1", "s2", "s3", "s4"):
        cfg = MCConfig(n=1000, reps=ACCEPT_REPS, test_size=10_000, methods=METHODS,
                       alpha=0.05, seed=ACCEPT_SEED, n_lambda=1000, engine="linear")
        out[design] = run_mc(GenerativeModel(design), cfg)
    return out
