"""Named, seed-derived random streams.

All randomness in a run (parameter init, dropout, SpecAugment, shuffling, toy
data) comes from ``stream(seed, name)``.  Streams with different names are
independent, so adding a consumer never perturbs the draws of another.
"""

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), _name_key(name)])))
