"""Named, order-independent random substreams derived from a single seed."""

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *keys) -> np.random.Generator:
    """Return a generator keyed by ``seed`` and a tuple of names/ints.

    The same (seed, keys) always yields the same stream regardless of how many
    other streams were drawn before it.
    """
    entropy = [int(seed) & 0xFFFFFFFF] + [_key(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def torch_seed(seed: int, *keys) -> int:
    return int(substream(seed, *keys).integers(0, 2**62))
