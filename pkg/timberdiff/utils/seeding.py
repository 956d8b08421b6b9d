"""Deterministic random streams derived from the single run seed."""
from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    MESH_SAMPLING = 1
    RANSAC = 2
    SYNTHETIC = 3


def derive_rng(seed: int, stream: Stream, *keys: int) -> np.random.Generator:
    """Generator for (seed, stream, keys...); distinct tuples give independent streams."""
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seed and stream keys must be non-negative")
    return np.random.default_rng([int(seed), int(stream), *map(int, keys)])

