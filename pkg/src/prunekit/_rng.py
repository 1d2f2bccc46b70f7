"""Counter-based random streams keyed by (seed, purpose, index...).

Every consumer of randomness asks for its own stream, so results never depend
on the order in which tasks are scheduled.
"""
import zlib

import numpy as np


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = (zlib.crc32(purpose.encode("utf-8")), *(int(i) for i in index))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed), spawn_key=key)))
