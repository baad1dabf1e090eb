"""Deterministic seed derivation for independent random streams.

A single master seed drives every random choice in a run. Sub-seeds are
derived with a splitmix64 finalizer chained over (purpose string, fold,
window), so distinct purposes get statistically independent streams while
the whole run stays reproducible from one integer.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def derive_seed(master: int, purpose: str, fold: int = 0, window: int = 0) -> int:
    """Derive a 64-bit sub-seed from (master, purpose, fold, window).

    The derivation is splitmix64 applied to the master seed xored with an
    FNV-1a hash of the purpose string, then chained over fold and window.
    """
    state = _splitmix64((master & _MASK64) ^ _fnv1a64(purpose.encode("utf-8")))
    state = _splitmix64(state ^ (fold & _MASK64))
    state = _splitmix64(state ^ (window & _MASK64))
    return state
