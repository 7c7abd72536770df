"""Multi-label F1 evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class EvalResult:
    per_label_f1: np.ndarray  # (C,)
    macro_f1: float
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0]) if len(self.tp) else 0


def _as_binary(x, name):
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"{name} must be an n x C matrix, got shape {x.shape}")
    if not np.all((x == 0) | (x == 1)):
        raise ValueError(f"{name} must be binary")
    return x.astype(bool)


def macro_f1(predictions, truths) -> EvalResult:
    """Per-label F1 = 2tp / (2tp + fp + fn), 0 when the denominator is 0; macro = plain mean."""
    pred = _as_binary(predictions, "predictions")
    true = _as_binary(truths, "truths")
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: predictions {pred.shape} vs truths {true.shape}")
    tp = (pred & true).sum(0)
    fp = (pred & ~true).sum(0)
    fn = (~pred & true).sum(0)
    tn = (~pred & ~true).sum(0)
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(len(tp)), where=denom > 0)
    return EvalResult(f1, float(f1.mean()) if len(f1) else 0.0, tp, fp, fn, tn)


def threshold_logits(logits, threshold: float = 0.5) -> np.ndarray:
    """1 where sigmoid(logit) > threshold (strict), else 0."""
    logits = np.asarray(logits, dtype=np.float64)
    with np.errstate(over="ignore"):
        prob = 1.0 / (1.0 + np.exp(-logits))
    return (prob > threshold).astype(np.int64)


def write_report(result: EvalResult, label_names, path: str | Path) -> None:
    """CSV with one row per label plus a trailing macro_f1 row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label_name", "tp", "fp", "fn", "tn", "f1"])
        for j, name in enumerate(label_names):
            w.writerow([name, int(result.tp[j]), int(result.fp[j]), int(result.fn[j]), int(result.tn[j]), f"{result.per_label_f1[j]:.6f}"])
        w.writerow(["macro_f1", "", "", "", "", f"{result.macro_f1:.6f}"])
