"""Splittable seeding.

Every random stream is ``numpy.random.default_rng(SeedSequence([seed, *path]))``
where ``seed`` is the run's 64-bit seed and ``path`` is a tuple of small
integers naming the consumer (see the ``STREAM_*`` constants). Streams with
different paths are statistically independent, and any single stream can be
replayed from ``(seed, path)`` alone.
"""

import numpy as np

STREAM_INIT = 1
STREAM_TASK = 2  # class factors / means of a synthetic task
STREAM_SAMPLES = 3  # followed by the split index
STREAM_BATCHES = 4
STREAM_DROPOUT = 5  # followed by step and sample index
STREAM_INSTANCES = 6  # followed by the instance index (CLI checks)

MASK64 = (1 << 64) - 1


def rng_for(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & MASK64, *path]))
