"""Tiny stable hashes used across the lab (split assignment, seeded noise)."""

from __future__ import annotations

_FNV_OFFSET = 0xcbf29ce484222325
_FNV_PRIME = 0x100000001b3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a; portable and stable across runs and platforms."""
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK
    return h


def unit_hash(data: bytes) -> float:
    """Map bytes to [0, 1) via FNV-1a."""
    return fnv1a_64(data) / 2.0 ** 64
