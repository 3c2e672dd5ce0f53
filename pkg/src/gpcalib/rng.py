"""Seeded, platform-independent randomness.

Uniform variates come from numpy's PCG64 generator; Gaussian variates are
produced by the inverse-CDF transform of those uniforms (not the ziggurat),
so any implementation with the same uniform stream reproduces the same
normals. Sub-seeds for independent work units (MCMC chains, per-sample
summary draws, per-profile latents) are derived with splitmix64 so that
concurrent execution cannot change results.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

__all__ = ["derive_seed", "make_rng", "standard_normal"]

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> int:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *indices: int) -> int:
    """Deterministic sub-seed for work unit (seed, i0, i1, ...)."""
    state = int(seed) & _MASK64
    out = _splitmix64(state)
    for i in indices:
        out = _splitmix64(out ^ (int(i) & _MASK64))
    return out


def make_rng(seed: int, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *indices)))


def standard_normal(rng: np.random.Generator, size=None) -> np.ndarray:
    """Standard normals via inverse CDF of PCG64 uniforms."""
    u = rng.random(size)
    # guard the measure-zero u == 0 case; ndtri(0) is -inf
    u = np.maximum(u, 1e-300)
    return ndtri(u)
