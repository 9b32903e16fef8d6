"""Keyed random streams.

Every random draw in the package comes from a generator built here, keyed by
the experiment seed plus a tuple of integers naming the purpose. Two callers
with different keys never share state, so work can be reordered or run in
parallel without changing results.
"""
import math
import zlib

import numpy as np

# stream tags
INIT = 1
SAMPLING = 2
LOCAL = 3
PUBLIC = 4
DATA = 5
SPLIT = 6
PARTITION = 7
DIAG = 8
SHARED = 0xFFFF


def keyed_rng(seed, *keys):
    """Return a fresh ``numpy.random.Generator`` for ``(seed, *keys)``."""
    entropy = [int(seed) & 0xFFFFFFFF] + [int(k) & 0xFFFFFFFF for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def name_key(name):
    """Stable integer key for a string (CRC32, platform independent)."""
    return zlib.crc32(name.encode("utf-8"))


def round_half_up(x):
    return int(math.floor(x + 0.5))
