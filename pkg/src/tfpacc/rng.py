"""Counter-based random streams.

Every random draw in the package comes from ``substream(seed, *keys)``: a
Philox generator keyed by the master seed plus a tuple of stream keys (draw
index, purpose string, ...). Results therefore never depend on how work is
split across processes.
"""
import hashlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be nonnegative")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed, *keys):
    """Independent generator for ``(seed, *keys)``."""
    if seed is None:
        raise ValueError("a seed is required")
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed, *keys):
    """A 63-bit integer seed derived from ``(seed, *keys)``."""
    h = hashlib.sha256(repr((_key_to_int(seed),) + tuple(str(k) for k in keys)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1
