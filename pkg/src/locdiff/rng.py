"""Keyed, counter-based random streams.

Every stochastic routine in the package draws from a stream identified by
``(seed, *keys)``.  Streams are Philox generators seeded through
:class:`numpy.random.SeedSequence`, so the same key always yields the same
numbers no matter which process or in which order it is requested.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"unsupported stream key {key!r}")


def stream(seed: int, *keys) -> np.random.Generator:
    """Return the generator for stream ``(seed, *keys)``.

    Keys may be non-negative integers or short strings (hashed with CRC32).
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
