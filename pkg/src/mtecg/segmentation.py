"""Non-overlapping segmentation of K x Q signals and uniform mask sampling.

Segment positions are 0-based throughout: segment ``t`` covers samples
``t*Q/T .. (t+1)*Q/T - 1`` of every lead and is flattened lead-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal_io import round_half_away


@dataclass
class SegmentSequence:
    segments: np.ndarray  # (T, K*Q/T)
    k_leads: int

    @property
    def t_len(self) -> int:
        return self.segments.shape[0]

    @property
    def d_seg(self) -> int:
        return self.segments.shape[1]


@dataclass(frozen=True)
class MaskPlan:
    unmasked: tuple[int, ...]
    masked: tuple[int, ...]
    t_len: int

    def __post_init__(self):
        for name, idx in (("unmasked", self.unmasked), ("masked", self.masked)):
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError(f"{name} indices must be strictly increasing")
        if sorted(self.unmasked + self.masked) != list(range(self.t_len)):
            raise ValueError("mask plan must partition 0..T-1")

    @property
    def n_unmasked(self) -> int:
        return len(self.unmasked)

    @property
    def n_masked(self) -> int:
        return len(self.masked)


def segment(signal: np.ndarray, t_len: int) -> SegmentSequence:
    """Split ``signal`` (K, Q) into ``t_len`` flattened segments of size K*Q/T."""
    signal = np.asarray(signal)
    if signal.ndim != 2:
        raise ValueError(f"signal must be K x Q, got shape {signal.shape}")
    k, q = signal.shape
    if t_len < 1 or q % t_len:
        raise ValueError(f"Q={q} is not divisible by T={t_len}")
    return SegmentSequence(segment_batch(signal[None], t_len)[0], k)


def segment_batch(signals: np.ndarray, t_len: int) -> np.ndarray:
    """(B, K, Q) -> (B, T, K*Q/T), lead-major within each segment."""
    b, k, q = signals.shape
    if q % t_len:
        raise ValueError(f"Q={q} is not divisible by T={t_len}")
    return signals.reshape(b, k, t_len, q // t_len).transpose(0, 2, 1, 3).reshape(b, t_len, -1)


def reassemble(seq: SegmentSequence | np.ndarray, q_samples: int, k_leads: int | None = None) -> np.ndarray:
    """Inverse of :func:`segment`; returns the (K, Q) signal."""
    if isinstance(seq, SegmentSequence):
        segments, k_leads = seq.segments, seq.k_leads
    else:
        segments = np.asarray(seq)
        if k_leads is None:
            raise ValueError("k_leads is required for raw segment arrays")
    t_len, d_seg = segments.shape
    if t_len * d_seg != k_leads * q_samples or d_seg % k_leads:
        raise ValueError(f"T*d_seg={t_len * d_seg} does not match K*Q={k_leads * q_samples}")
    return segments.reshape(t_len, k_leads, q_samples // t_len).transpose(1, 0, 2).reshape(k_leads, q_samples)


def n_masked_for(t_len: int, masking_ratio: float) -> int:
    return round_half_away(masking_ratio * t_len)


def sample_mask(t_len: int, masking_ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Mask ``round(ratio * T)`` positions drawn uniformly without replacement."""
    if not 0.0 <= masking_ratio <= 1.0:
        raise ValueError(f"masking ratio must be in [0, 1], got {masking_ratio}")
    n_mask = n_masked_for(t_len, masking_ratio)
    chosen = rng.permutation(t_len)[:n_mask]
    is_masked = np.zeros(t_len, dtype=bool)
    is_masked[chosen] = True
    return MaskPlan(
        unmasked=tuple(int(i) for i in np.flatnonzero(~is_masked)),
        masked=tuple(int(i) for i in np.flatnonzero(is_masked)),
        t_len=t_len,
    )
