"""Named random substreams derived from a single seed.

Every consumer of randomness (corpus split, parameter init, negative
sampling, distractor pools, ...) draws from its own named stream, so adding
or reordering one consumer never perturbs the draws of another.
"""

import zlib

import numpy as np


def stream(seed, *names):
    """Return a Generator for the substream identified by `names`.

    Same (seed, names) always yields the same stream; different names yield
    statistically independent streams.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for name in names:
        entropy.append(zlib.crc32(str(name).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(entropy))
