"""Seeded training-time augmentations for amplitude sequences.

Each call either applies exactly one of three perturbations (additive
Gaussian noise, global scaling, time shift with mean fill) or passes the
sample through unchanged. All randomness flows through explicit numpy
generators so batches rebuild bit-identically from (seed, sample index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from csireid.csi_core import FeatureSequence


@dataclass(frozen=True)
class AugmentPolicy:
    apply_prob: float = 0.9
    noise_sigma: float = 0.02
    scale_range: tuple[float, float] = (0.9, 1.1)
    shift_range: int = 5
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        low, high = self.scale_range
        if low > high:
            raise ValueError("scale_range low must be <= high")
        if low <= 0:
            raise ValueError("scale_range must be positive")
        if self.shift_range < 0:
            raise ValueError("shift_range must be >= 0")


def sample_rng(policy: AugmentPolicy, sample_index: int) -> np.random.Generator:
    """Per-sample generator; independent streams, reproducible across runs."""
    return np.random.default_rng(
        np.random.SeedSequence([policy.rng_seed, 0x41554701, sample_index])
    )


def add_gaussian_noise(
    seq: FeatureSequence, sigma: float, rng: np.random.Generator
) -> FeatureSequence:
    """Independent Normal(0, sigma^2) noise on every entry."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return FeatureSequence(seq.n_pkt, seq.n_feat, seq.data.copy())
    noise = rng.normal(0.0, sigma, size=seq.data.shape)
    return FeatureSequence(seq.n_pkt, seq.n_feat, seq.data + noise)


def scale_amplitude(seq: FeatureSequence, factor: float) -> FeatureSequence:
    """Multiply every entry by one global factor."""
    if not factor > 0:
        raise ValueError("factor must be > 0")
    return FeatureSequence(seq.n_pkt, seq.n_feat, seq.data * factor)


def time_shift(seq: FeatureSequence, t_shift: int) -> FeatureSequence:
    """Shift each column along the packet axis, filling vacated slots.

    Positive shifts move values later; vacated positions take the column's
    original mean so length stays P.
    """
    if abs(t_shift) > seq.n_pkt:
        raise ValueError(f"|t_shift|={abs(t_shift)} exceeds packet count {seq.n_pkt}")
    out = np.tile(seq.data.mean(axis=0), (seq.n_pkt, 1))
    if t_shift >= 0:
        out[t_shift:] = seq.data[: seq.n_pkt - t_shift]
    else:
        out[: seq.n_pkt + t_shift] = seq.data[-t_shift:]
    return FeatureSequence(seq.n_pkt, seq.n_feat, out)


def apply_policy(
    seq: FeatureSequence, policy: AugmentPolicy, rng: np.random.Generator
) -> FeatureSequence:
    """Gate on apply_prob, then apply one uniformly chosen augmentation."""
    if rng.random() >= policy.apply_prob:
        return FeatureSequence(seq.n_pkt, seq.n_feat, seq.data.copy())
    which = int(rng.integers(3))
    if which == 0:
        return add_gaussian_noise(seq, policy.noise_sigma, rng)
    if which == 1:
        low, high = policy.scale_range
        return scale_amplitude(seq, float(rng.uniform(low, high)))
    bound = policy.shift_range
    return time_shift(seq, int(rng.integers(-bound, bound + 1)))
