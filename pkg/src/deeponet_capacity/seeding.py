"""Named random substreams derived from a single integer seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "epsilon", "shuffle", "verify")


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *keys)``.

    The same arguments always give the same stream, no matter how many other
    streams were drawn before it.
    """
    tag = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(tag, *map(int, keys)))
    return np.random.default_rng(ss)
