"""Named random streams derived from one root seed.

Each stage (trajectory noise, hole punching, epsilon draws, weight init,
split shuffle, ...) gets its own generator so that re-seeding one stage
never perturbs the others.
"""
import zlib

import numpy as np


def stream(root_seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(root_seed), spawn_key=(key,)))
