"""Counter-based random streams with per-path slots.

Every consumer draws from a Philox generator keyed by (seed, tag) and
positioned at a fixed raw-output offset per path.  Path i always reads
raws [i*stride, (i+1)*stride), so any partition of paths over blocks or
threads reproduces the same numbers bit for bit.

Normals come from the inverse CDF applied to fixed-consumption uniforms
(one raw per draw); numpy's ziggurat normals consume a variable number
of raws and would break slot arithmetic.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

# stream tags: one per purpose so draws never collide across uses
TAG_BROWNIAN = 1
TAG_JUMP_COUNTS = 2
TAG_JUMP_TIMES = 3
TAG_BARRIER = 4
TAG_REFINE = 5
TAG_CHAOS = 6
TAG_INNER = 7

_MASK64 = (1 << 64) - 1
# Philox.advance() moves the counter in 4-raw blocks
_BLOCK = 4


def stride_for(draws: int) -> int:
    """Raw slots reserved per path: draws rounded up to a counter block."""
    return max(_BLOCK, ((int(draws) + _BLOCK - 1) // _BLOCK) * _BLOCK)


def _philox(seed: int, tag: int, raw_offset: int) -> np.random.Philox:
    if raw_offset % _BLOCK:
        raise ValueError("raw offset must be a multiple of 4")
    ss = np.random.SeedSequence(entropy=(int(seed) & _MASK64, int(tag)))
    bg = np.random.Philox(seed=ss)
    if raw_offset:
        bg.advance(raw_offset // _BLOCK)
    return bg


def raw_block(seed: int, tag: int, first_path: int, n_paths: int,
              draws: int, stride: int | None = None) -> np.ndarray:
    """(n_paths, draws) uint64 raws; path p occupies slot first_path + p."""
    if stride is None:
        stride = stride_for(draws)
    if draws > stride:
        raise ValueError("draws exceed slot stride")
    bg = _philox(seed, tag, first_path * stride)
    raw = bg.random_raw(n_paths * stride)
    return raw.reshape(n_paths, stride)[:, :draws]


def uniform_block(seed: int, tag: int, first_path: int, n_paths: int,
                  draws: int, stride: int | None = None) -> np.ndarray:
    """Uniforms on the open interval (0,1), one raw consumed per draw."""
    raw = raw_block(seed, tag, first_path, n_paths, draws, stride)
    return (raw >> np.uint64(11)) * 2.0 ** -53 + 2.0 ** -54


def normal_block(seed: int, tag: int, first_path: int, n_paths: int,
                 draws: int, stride: int | None = None) -> np.ndarray:
    return ndtri(uniform_block(seed, tag, first_path, n_paths, draws, stride))
