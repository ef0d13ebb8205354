"""Deterministic RNG derivation.

Every random draw in the engine comes from a Generator derived here, so a
single root seed pins the whole pipeline bit-exactly.
"""

import zlib

import numpy as np


def child_seed(root: int, *tags) -> np.random.SeedSequence:
    """Derive a child SeedSequence from a root seed and a tag path.

    Tags may be strings or ints; strings are folded to stable 32-bit values
    so the derivation does not depend on Python's randomized hash.
    """
    keys = []
    for tag in tags:
        if isinstance(tag, str):
            keys.append(zlib.crc32(tag.encode("utf-8")))
        elif isinstance(tag, (int, np.integer)):
            keys.append(int(tag) & 0xFFFFFFFF)
        else:
            raise TypeError(f"unsupported seed tag type: {type(tag)!r}")
    return np.random.SeedSequence(entropy=int(root), spawn_key=tuple(keys))


def rng_for(root: int, *tags) -> np.random.Generator:
    """Generator seeded by (root, *tags); same arguments, same stream."""
    return np.random.Generator(np.random.PCG64(child_seed(root, *tags)))
