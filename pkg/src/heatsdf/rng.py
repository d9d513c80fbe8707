"""Reproducible random streams.

Every stream is a Philox-4x64 generator (counter-based) keyed by the run seed;
the stream identifiers fill the counter so distinct streams never overlap.
"""

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    counter = [0, 0, 0, 0]
    for i, s in enumerate(stream[:3]):
        counter[i + 1] = int(s) & 0xFFFFFFFFFFFFFFFF
    # Counter word 0 is left for the generator to advance; streams are 2**64
    # blocks apart, far more than any run draws.
    bit_gen = np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF, counter=counter)
    return np.random.Generator(bit_gen)
