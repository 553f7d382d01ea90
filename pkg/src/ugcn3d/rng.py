"""Seeded, splittable random streams.

All randomness goes through numpy's Philox counter-based bit generator keyed
by a :class:`numpy.random.SeedSequence` built from an integer path
``(seed, *key)``. The stream for a given path is fixed by numpy's documented
Philox algorithm, so masks, initial weights and synthetic data are identical
on every platform and independent of how many other streams were drawn.
"""

import numpy as np

# stream tags keep unrelated consumers from ever sharing a key path
INIT = 1
DROPOUT = 2
SYNTH = 3
NOISE = 4
OCCLUSION = 5
BATCHING = 6


def generator(seed, *key):
    """Return a fresh ``Generator`` for the key path ``(seed, *key)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
