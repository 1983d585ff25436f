"""Counter-based random streams.

Every random draw used during embedding is a pure function of
``(seed, block_index, mode_index, draw_index)``.  This is what makes the
output independent of processing order and worker count.

The generator is Philox4x32-10 (Salmon et al., SC'11), vectorised over numpy
arrays of counters.
"""
from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)


def philox4x32(counter, key, rounds=10):
    """Apply the Philox4x32 bijection.

    Parameters
    ----------
    counter : sequence of 4 uint32-compatible arrays (broadcastable)
    key : sequence of 2 uint32-compatible arrays (broadcastable)

    Returns
    -------
    tuple of 4 ``uint32`` arrays
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK32 for c in counter)
    k0, k1 = (np.asarray(k, dtype=np.uint64) & _MASK32 for k in key)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT32) ^ c1 ^ k0,
            p1 & _MASK32,
            (p0 >> _SHIFT32) ^ c3 ^ k1,
            p0 & _MASK32,
        )
    return tuple(c.astype(np.uint32) for c in (c0, c1, c2, c3))


def _split_seed(seed):
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return seed & 0xFFFFFFFF, seed >> 32


def uniform(seed, block_index, mode_index, draw_index):
    """Uniform doubles in [0, 1) keyed on (seed, block, mode, draw).

    ``block_index``, ``mode_index`` and ``draw_index`` broadcast against each
    other.  Uses 53 bits from two output words.
    """
    k0, k1 = _split_seed(seed)
    block_index = np.asarray(block_index, dtype=np.uint64)
    ctr = (
        np.asarray(draw_index, dtype=np.uint64),
        np.asarray(mode_index, dtype=np.uint64),
        block_index & _MASK32,
        block_index >> _SHIFT32,
    )
    x0, x1, _, _ = philox4x32(ctr, (k0, k1))
    hi = x0.astype(np.uint64) >> np.uint64(5)  # 27 bits
    lo = x1.astype(np.uint64) >> np.uint64(6)  # 26 bits
    return ((hi << np.uint64(26)) | lo).astype(np.float64) * (1.0 / 9007199254740992.0)


def open_uniform(seed, block_index, mode_index, draw_index):
    """Uniform doubles in (0, 1): safe to feed to an inverse normal CDF."""
    u = uniform(seed, block_index, mode_index, draw_index)
    return u + 0.5 / 9007199254740992.0
