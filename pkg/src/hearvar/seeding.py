"""Named deterministic random substreams.

All randomness in the project flows from a single user-supplied seed
through `substream(seed, STREAM_X, ...)`, so fold splitting, parameter
initialization, and sampling can be varied independently and reruns are
bit-identical.
"""

from __future__ import annotations

import numpy as np

STREAM_GENERATOR = 0
STREAM_SPLIT = 1
STREAM_INIT = 2
STREAM_SAMPLING = 3
STREAM_TRAIN = 4


def substream(seed: int, *tags: int) -> np.random.Generator:
    """A generator keyed by (seed, *tags); same key, same stream."""
    seed = int(seed)
    if seed < 0:
        raise ValueError("seeds must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([seed, *(int(t) for t in tags)]))
