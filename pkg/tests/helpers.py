"""Independent oracles shared by the unit and acceptance tests."""

import numpy as np
import torch

from mtecg.model import backward, trace

FD_STEP = 1e-5
# Relative error is |a - n| / max(|a|, |n|, REL_FLOOR); the floor keeps
# entries whose true gradient is ~0 from dividing rounding noise by ~0.
REL_FLOOR = 1e-6


def sample_entries(params, n, rng, names=None):
    """At least one entry of every tensor, the rest uniformly over all entries."""
    names = sorted(names or params)
    picks = [(name, int(rng.integers(params[name].numel()))) for name in names]
    sizes = np.array([params[name].numel() for name in names])
    flat = rng.choice(sizes.sum(), size=max(0, n - len(picks)), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for f in flat:
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        picks.append((names[i], int(f - offsets[i])))
    return picks


def finite_difference_check(fn, params, n_entries=240, seed=0, step=FD_STEP, names=None):
    """Max relative error between reverse-mode and central-difference gradients of scalar ``fn(params)``."""
    analytic = backward(trace(fn, params))
    rng = np.random.default_rng(seed)
    worst, rows = 0.0, []
    with torch.no_grad():
        for name, flat in sample_entries(params, n_entries, rng, names):
            p = {k: v.clone() for k, v in params.items()}
            view = p[name].view(-1)
            orig = float(view[flat])
            view[flat] = orig + step
            up = float(fn(p))
            view[flat] = orig - step
            down = float(fn(p))
            numeric = (up - down) / (2 * step)
            a = float(analytic[name].reshape(-1)[flat])
            err = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            rows.append((name, flat, a, numeric, err))
            worst = max(worst, err)
    return worst, rows


def layer_norm_np(x, w, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


# (criterion number, check label, passed, detail) rows printed after the session.
ACCEPTANCE = []


def report(criterion, label, ok, detail=""):
    ACCEPTANCE.append((criterion, label, bool(ok), detail))
    return bool(ok)
