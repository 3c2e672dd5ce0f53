"""Data model: multichannel profile sets, masks, calibration factors,
and the post-calibration transform.

Values are immutable after construction; every operation returns new
objects, so they are safe to share across threads.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .kernels import KernelParams, NoiseParams

__all__ = [
    "ProfileSet",
    "CalibrationFactors",
    "GroundTruth",
    "center_profiles",
    "uncenter_profiles",
    "post_calibrate",
    "validate",
]

MIN_CHANNELS_PER_PROFILE = 3


@dataclass(frozen=True)
class ProfileSet:
    """N channels x M profiles of observations with per-point masks.

    mask[i, j] is True when observation (channel i, profile j) is used
    for inference; masked-out points (manually flagged outliers) are
    retained for reporting but never enter any likelihood.
    """

    positions: np.ndarray      # (N,) channel positions
    data: np.ndarray           # (N, M) observed values
    mask: np.ndarray           # (N, M) boolean
    channel_ids: tuple[str, ...]
    profile_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float))
        object.__setattr__(self, "data", np.asarray(self.data, dtype=float))
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        object.__setattr__(self, "channel_ids", tuple(str(c) for c in self.channel_ids))
        object.__setattr__(self, "profile_ids", tuple(str(p) for p in self.profile_ids))

    @property
    def n_channels(self) -> int:
        return self.positions.shape[0]

    @property
    def n_profiles(self) -> int:
        return self.data.shape[1] if self.data.ndim == 2 else 0


@dataclass(frozen=True)
class CalibrationFactors:
    """Per-channel multiplicative gains a_i, stored as log a_i."""

    log_a: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "log_a", np.atleast_1d(np.asarray(self.log_a, dtype=float)))

    @property
    def a(self) -> np.ndarray:
        return np.exp(self.log_a)

    def inverse(self) -> "CalibrationFactors":
        return CalibrationFactors(-self.log_a)

    @property
    def n_channels(self) -> int:
        return self.log_a.shape[0]


@dataclass(frozen=True)
class GroundTruth:
    """Bookkeeping for synthetic datasets: the true latents and parameters."""

    latents: np.ndarray              # (N, M) true f_j(x_i), offset included
    true_factors: CalibrationFactors
    true_noise: NoiseParams
    kernel: KernelParams


def validate(ps: ProfileSet) -> list[str]:
    """Check all ProfileSet invariants; returns a list of violation
    messages naming the offending channels/profiles. Empty list = valid."""
    violations: list[str] = []
    n, = ps.positions.shape
    if ps.data.ndim != 2:
        violations.append("data is not a 2-D matrix")
        return violations
    m = ps.data.shape[1]
    if n < MIN_CHANNELS_PER_PROFILE:
        violations.append(f"need at least {MIN_CHANNELS_PER_PROFILE} channels, got {n}")
    if m < 1:
        violations.append("need at least one profile")
    if ps.data.shape != (n, m):
        violations.append(f"data shape {ps.data.shape} does not match {n} positions")
    if ps.mask.shape != ps.data.shape:
        violations.append(f"mask shape {ps.mask.shape} does not match data shape {ps.data.shape}")
        return violations
    if len(ps.channel_ids) != n:
        violations.append(f"{len(ps.channel_ids)} channel_ids for {n} channels")
    if len(ps.profile_ids) != m:
        violations.append(f"{len(ps.profile_ids)} profile_ids for {m} profiles")
    if not np.all(np.isfinite(ps.positions)):
        violations.append("non-finite positions")
    elif np.any(np.diff(np.sort(ps.positions)) <= 0):
        violations.append("non-increasing positions (duplicate channel positions)")
    bad = ~np.isfinite(ps.data) & ps.mask
    for i, j in zip(*np.nonzero(bad)):
        violations.append(
            f"non-finite value at channel {ps.channel_ids[i]}, profile {ps.profile_ids[j]}"
        )
    counts = ps.mask.sum(axis=0)
    for j in np.nonzero(counts < MIN_CHANNELS_PER_PROFILE)[0]:
        violations.append(
            f"profile {ps.profile_ids[j]} has only {counts[j]} masked-in channels "
            f"(minimum {MIN_CHANNELS_PER_PROFILE})"
        )
    return violations


def center_profiles(ps: ProfileSet) -> tuple[ProfileSet, np.ndarray]:
    """Subtract each profile's masked-in mean; returns (centered set, means).

    Masked-out entries are left untouched so uncenter_profiles restores
    the input exactly on masked-in entries.
    """
    counts = ps.mask.sum(axis=0)
    short = np.nonzero(counts < MIN_CHANNELS_PER_PROFILE)[0]
    if short.size:
        names = ", ".join(ps.profile_ids[j] for j in short)
        raise ValueError(f"underdetermined profile: {names}")
    sums = np.where(ps.mask, ps.data, 0.0).sum(axis=0)
    means = sums / counts
    data = np.where(ps.mask, ps.data - means[None, :], ps.data)
    return replace(ps, data=data), means


def uncenter_profiles(ps: ProfileSet, means: np.ndarray) -> ProfileSet:
    """Add per-profile means back to masked-in entries (inverse of centering)."""
    means = np.asarray(means, dtype=float)
    data = np.where(ps.mask, ps.data + means[None, :], ps.data)
    return replace(ps, data=data)


def post_calibrate(ps: ProfileSet, cf: CalibrationFactors) -> ProfileSet:
    """Divide each channel's observations by its gain a_i.

    The observation model is d = a_i * f + noise, so division recovers
    the latent scale; masks and positions are copied unchanged.
    """
    if cf.n_channels != ps.n_channels:
        raise ValueError(
            f"factor count {cf.n_channels} does not match channel count {ps.n_channels}"
        )
    a = cf.a
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ValueError("calibration factors must be finite and positive")
    return replace(ps, data=ps.data / a[:, None])
