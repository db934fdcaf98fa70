"""Named RNG substream derivation.

Every random draw in a run comes from a stream addressed by a path such
as ``(seed, node, "batch", iteration)``. Streams with different paths
are statistically independent, and a stream's content depends only on
its own path, so adding nodes or iterations never perturbs draws made
elsewhere.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream"]

_MASK32 = 0xFFFFFFFF
_NAME_CODES: dict[str, int] = {}


def _encode(part: int | str) -> int:
    if type(part) is str:
        code = _NAME_CODES.get(part)
        if code is None:
            code = _NAME_CODES[part] = zlib.crc32(part.encode("utf-8"))
        return code
    value = int(part)
    if value < 0:
        raise ValueError(f"stream path integers must be non-negative, got {value}")
    return value & _MASK32


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Return the generator addressed by ``(seed, *path)``.

    Path parts may be non-negative integers (node ids, iteration
    counters) or short strings naming the purpose of the stream.
    """
    key = [None] * len(path)
    for idx, part in enumerate(path):
        key[idx] = _encode(part)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))
