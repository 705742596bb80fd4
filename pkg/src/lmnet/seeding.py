"""Deterministic random stream derivation.

Every stochastic choice in the package (weight init, shuffling, dropout,
synthetic data) draws from a generator derived here, so a run is fully
reproducible from integer seeds and no generator state ever needs to be
serialized: resuming mid-run just re-derives the same streams.
"""

import numpy as np


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Return a Generator keyed by (seed, *key).

    The same arguments always produce the same stream; distinct keys produce
    independent streams. Keys must be non-negative integers.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(seq)
