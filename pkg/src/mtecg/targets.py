"""Reconstruction targets computed on masked segments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ALIASES = {
    "identity": "identity",
    "psn": "per_segment_norm",
    "per_segment_norm": "per_segment_norm",
    "ssqrt": "signed_sqrt",
    "signed_sqrt": "signed_sqrt",
}

SHORT_NAMES = {"identity": "identity", "per_segment_norm": "psn", "signed_sqrt": "ssqrt"}


@dataclass(frozen=True)
class TargetKind:
    name: str = "per_segment_norm"
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.name not in SHORT_NAMES:
            raise ValueError(f"unknown target {self.name!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def parse(cls, name: str, epsilon: float = 1e-6) -> "TargetKind":
        try:
            return cls(_ALIASES[name], epsilon)
        except KeyError:
            raise ValueError(f"unknown target {name!r}; choose identity, psn or ssqrt") from None

    @property
    def short_name(self) -> str:
        return SHORT_NAMES[self.name]


def apply_target(x: np.ndarray, kind: TargetKind) -> np.ndarray:
    """Transform segment vectors along the last axis.

    ``per_segment_norm`` standardises each segment with its own mean and
    biased variance, ``(x - mu) / sqrt(var + eps)``; ``signed_sqrt`` maps
    each entry to ``sign(x) * |x|**0.5``.
    """
    x = np.asarray(x)
    if kind.name == "identity":
        return x.copy()
    if kind.name == "signed_sqrt":
        return np.sign(x) * np.sqrt(np.abs(x))
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + kind.epsilon)
