"""Seeding discipline for reproducible parallel realizations.

Every realization draws from its own Philox4x64 stream (a counter-based
generator) keyed by a 64-bit seed. Seeds for realization ``i`` of an
ensemble are derived from the ensemble's base seed with :func:`derive_seed`,
so the stream of a realization depends only on ``(base, i)`` and never on
which worker ran it or in which order.

``derive_seed`` is pinned as::

    derive_seed(base, index) = mix64(mix64(base) + (index + 1) * GAMMA)

where ``mix64`` is the SplitMix64 finalizer (Steele, Lea & Flood 2014) and
``GAMMA = 0x9E3779B97F4A7C15``. ``mix64`` is a bijection on 64-bit words, so
for a fixed base distinct indices (mod 2**64) never collide, and for a fixed
index distinct bases never collide.
"""
import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, index: int) -> int:
    """Child seed for stream ``index`` of ``base`` (both unsigned 64-bit)."""
    if base < 0 or index < 0:
        raise ValueError("seeds and indices are unsigned 64-bit integers")
    return mix64((mix64(base) + ((index + 1) * GAMMA)) & MASK64)


def make_rng(seed: int) -> np.random.Generator:
    """Generator for one realization; same seed gives the same stream everywhere."""
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.random.Generator(np.random.Philox(key=seed))
