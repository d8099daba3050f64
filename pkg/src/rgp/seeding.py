"""Deterministic RNG streams keyed by a base seed plus integer counters.

Every source of randomness in the library (weight init, batch sampling,
carrier generation, noise, orthonormal fill) draws from its own stream so
that reruns with the same seed are bit-identical regardless of call order.
"""

import numpy as np

# Stream tags; keep stable, they are part of the determinism contract.
INIT = 0
BATCH = 1
CARRIERS = 2
NOISE = 3
FILL = 4


def seeded_rng(*key):
    """Return an independent generator for a tuple of non-negative ints.

    The same key always yields the same stream.
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))
