"""Counter-based keyed randomness.

Every random draw in the pipeline is a pure function of an integer key tuple
(global seed, purpose tag, scene index, point index, ...). Results therefore
do not depend on iteration order or on how work is split across threads.
"""

from __future__ import annotations

import zlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer, vectorized over uint64 arrays
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def _as_key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    return int(k) & _MASK


def _flatten(keys):
    for k in keys:
        if isinstance(k, (tuple, list)):
            yield from _flatten(k)
        else:
            yield k


def derive_seed(*keys) -> int:
    """Fold a key tuple (ints or short string tags) into one 64-bit seed."""
    h = np.array([0x243F6A8885A308D3], dtype=np.uint64)
    with np.errstate(over="ignore"):
        for k in _flatten(keys):
            h = _mix(h ^ (np.array([_as_key(k)], dtype=np.uint64) + _GOLDEN))
    return int(h[0])


def generator(*keys) -> np.random.Generator:
    """A Philox generator keyed by the given tuple."""
    return np.random.Generator(np.random.Philox(key=derive_seed(*keys)))


def keyed_bits(key: int, index: np.ndarray) -> np.ndarray:
    idx = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(_mix(idx * _GOLDEN + np.uint64(key)) ^ np.uint64(key))


def keyed_uniform(key: int, index: np.ndarray) -> np.ndarray:
    """Uniform draws in the open interval (0, 1), one per index."""
    bits = keyed_bits(key, index) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * 2.0**-53


def keyed_normal(key: int, index: np.ndarray) -> np.ndarray:
    """Standard normal draws (Box-Muller on two keyed uniform streams)."""
    u1 = keyed_uniform(derive_seed(key, "bm1"), index)
    u2 = keyed_uniform(derive_seed(key, "bm2"), index)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
