"""Named, counter-based random streams.

Every random draw in the package goes through :func:`stream`, so two runs that
share a top-level seed also share every substream (init, split, probe, ...).
"""

import zlib

import numpy as np


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Return a Philox generator keyed by ``(seed, purpose)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_purpose_key(purpose),))
    return np.random.Generator(np.random.Philox(ss))
