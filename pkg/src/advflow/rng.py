"""Reproducible random streams.

Every stream is a Philox (counter-based) generator keyed by a master seed plus
a tuple of integer keys, so independent consumers never share state and any
stream can be rebuilt from ``(seed, keys)`` alone.
"""

import zlib

import numpy as np


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    return int(k)


def _flatten(items):
    for k in items:
        if isinstance(k, (tuple, list)):
            yield from _flatten(k)
        else:
            yield k


def make_rng(seed, *keys):
    """Return a generator for the stream ``(seed, *keys)``.

    Keys may be ints, short strings (hashed with CRC32) or nested tuples of
    those; a tuple ``seed`` is flattened into the key path.
    """
    seed, *rest = _flatten((seed, *keys))
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in rest))
    return np.random.Generator(np.random.Philox(ss))
