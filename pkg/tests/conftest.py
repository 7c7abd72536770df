import numpy as np
import pytest
import torch

from mtecg.model import ModelConfig

# Small configuration used across the model and gradient tests.
GRAD_CFG = ModelConfig(t_len=8, d_seg=6, d_model=16, n_heads=2, n_layers=2, d_decoder=8, decoder_heads=2, n_labels=3)

# Toy configuration for short training runs on synthetic data (K=2, Q=400, T=20).
TOY_CFG = ModelConfig(t_len=20, d_seg=40, d_model=64, n_heads=2, n_layers=2, d_decoder=32, decoder_heads=2, n_labels=3)


def perturbed(params, seed, scale=0.3):
    """Copy of ``params`` with every tensor shifted by N(0, scale^2) noise, so no weight is trivially zero."""
    rng = np.random.default_rng(seed)
    return {k: v + torch.as_tensor(rng.normal(0, scale, v.shape), dtype=v.dtype) for k, v in params.items()}


@pytest.fixture
def grad_cfg():
    return GRAD_CFG


@pytest.fixture
def toy_cfg():
    return TOY_CFG


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    by_criterion = {}
    for crit, label, ok, detail in ACCEPTANCE:
        by_criterion.setdefault(crit, []).append((label, ok, detail))
    for crit in sorted(by_criterion):
        checks = by_criterion[crit]
        status = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        parts = "; ".join(f"{label}: {'ok' if ok else 'FAILED'} ({detail})" for label, ok, detail in checks)
        terminalreporter.write_line(f"criterion {crit:>2}: {status} | {parts}")
