"""Seed fan-out and counter-based per-sample random streams."""
from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def derive_seed(seed: int, name: str) -> int:
    """Stable 63-bit sub-seed for a named stage such as "shuffle"."""
    h = hashlib.blake2b(f"{int(seed)}/{name}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "big") >> 1


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, stream: int, index) -> np.ndarray:
    """Uniform [0, 1) draws that depend only on (seed, stream, index).

    Each sample index gets its own value regardless of evaluation order,
    so generation can be split across workers without changing results.
    """
    idx = np.asarray(index, dtype=np.uint64)
    key = _splitmix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _splitmix(np.uint64(stream)))
    with np.errstate(over="ignore"):
        bits = _splitmix(_splitmix(idx ^ key) + key)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
