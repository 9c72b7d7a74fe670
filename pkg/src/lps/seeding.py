"""Deterministic seed splitting.

Every random draw in a run comes from a generator derived from the root seed
plus a path of keys (module name, task id, epoch, ...), so any task can be
replayed in isolation and a resumed run sees the same streams as an
uninterrupted one.
"""
import zlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def rng_for(root_seed, *keys):
    """Return a generator for ``(root_seed, *keys)``; same arguments, same stream."""
    seq = np.random.SeedSequence(
        entropy=_key_to_int(root_seed), spawn_key=tuple(_key_to_int(k) for k in keys)
    )
    return np.random.Generator(np.random.PCG64(seq))
