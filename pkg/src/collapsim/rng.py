"""Deterministic random stream derivation.

Every random draw in the package comes from a generator built here. A
stream is addressed by the master seed plus an integer key path, so the
same (seed, key) pair always yields the same draws no matter how many
other streams were consumed before it. That property is what lets the
Monte Carlo driver hand trials to worker processes in any order and
still reproduce the serial run bit for bit.
"""

from __future__ import annotations

import numpy as np

# Key-path domain tags. First component of every spawn key.
DOMAIN_BETA_STAR = 0   # ground-truth parameter draw (one per run)
DOMAIN_INIT = 1        # round-0 per-node dataset draws
DOMAIN_EDGE = 2        # per-round per-edge dataset draws
DOMAIN_SOURCE = 3      # per-round per-source draws (broadcast sharing)
DOMAIN_ORACLE = 4      # per-round per-learner fresh oracle draws
DOMAIN_MISC = 5        # one-off draws (sandwich Monte Carlo, tests)


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator for one (seed, key path) address.

    seed must be a non-negative integer; key components index trial,
    round, and edge/node slots.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)
