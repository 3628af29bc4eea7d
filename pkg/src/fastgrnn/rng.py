"""Seeded, splittable random streams.

Philox is counter-based, so a (seed, stream id) pair names a reproducible
stream independent of every other stream derived from the same seed. The
trainer draws weight init, epoch shuffling, and synthetic data from separate
streams so that, for example, changing the batch order cannot perturb the
initial weights.
"""

from __future__ import annotations

import numpy as np

# Reserved stream ids. Keep stable: they are part of the reproducibility contract.
INIT = 0
SHUFFLE = 1
SYNTH = 2
PROBE = 3
SPLIT = 4


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator for `seed` at stream `path`.

    Identical (seed, path) always yields the identical sequence of draws,
    on every platform.
    """
    seq = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seed=seq))
