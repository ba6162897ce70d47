"""Seeded random streams.

All randomness comes from numpy's counter-based Philox-4x64 bit generator,
keyed through ``SeedSequence([seed, stream])``.  The pair ``(seed, stream)``
fully determines a stream, so independent consumers (initial latent,
coefficient init, DDIM noise) never share state.
"""

import numpy as np

RNG_NAME = "philox4x64-seedseq-v1"

STREAM_LATENT = 0
STREAM_COE = 1
STREAM_DDIM_NOISE = 2


def stream(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))
