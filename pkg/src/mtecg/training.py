"""AdamW, cosine schedule, layer-wise LR decay and the pre-training / fine-tuning loops."""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .metrics import macro_f1, threshold_logits
from .model import (
    ModelConfig,
    backward,
    classify_loss,
    encoder_shapes,
    forward_classify,
    gather_segments,
    init_parameters,
    is_decoder_param,
    pretrain_loss,
    trace,
)
from .segmentation import n_masked_for, sample_mask, segment_batch
from .signal_io import Dataset
from .targets import TargetKind, apply_target

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    base_lr: float = 1e-3
    batch_size: int = 256
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.weight_decay < 0 or self.base_lr <= 0 or self.batch_size < 1:
            raise ValueError("invalid optimizer settings")


@dataclass(frozen=True)
class ScheduleConfig:
    total_epochs: int = 1600
    warmup_epochs: int = 40
    steps_per_epoch: int = 1
    min_lr: float = 0.0

    def __post_init__(self):
        if self.total_epochs < 0 or self.warmup_epochs < 0 or self.warmup_epochs > self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def pretrain_defaults() -> tuple[OptimizerConfig, ScheduleConfig]:
    return OptimizerConfig(0.9, 0.95, 0.05, 1e-3, 256), ScheduleConfig(1600, 40, 1, 0.0)


@dataclass(frozen=True)
class FinetuneConfig:
    optimizer: OptimizerConfig = OptimizerConfig(0.9, 0.999, 0.05, 1e-3, 256)
    schedule: ScheduleConfig = ScheduleConfig(50, 5, 1, 1e-6)
    droppath_rate: float = 0.4
    layer_decay: float = 0.6
    classifier: str = "global_pool"
    threshold: float = 0.5
    selection_metric: str = "macro_f1_on_validation"

    def __post_init__(self):
        if not 0 < self.layer_decay <= 1:
            raise ValueError("layer_decay must lie in (0, 1]")
        if not 0 <= self.droppath_rate < 1:
            raise ValueError("droppath_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        d = dict(d)
        d["optimizer"] = OptimizerConfig(**d["optimizer"])
        d["schedule"] = ScheduleConfig(**d["schedule"])
        return cls(**d)


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------


def cosine_lr(step: int, schedule: ScheduleConfig, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine down to ``min_lr`` at the last step."""
    warm, total = schedule.warmup_steps, schedule.total_steps
    if step < warm:
        return base_lr * step / warm
    if total <= warm:
        return base_lr
    progress = min(1.0, (step - warm) / (total - warm))
    return schedule.min_lr + (base_lr - schedule.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def layerwise_lr_scale(depth_index: int, n_layers: int, decay: float) -> float:
    """``decay ** (L + 1 - depth)``: 0 is the embedding level, L + 1 the head."""
    if not 0 <= depth_index <= n_layers + 1:
        raise ValueError(f"depth index {depth_index} outside 0..{n_layers + 1}")
    return decay ** (n_layers + 1 - depth_index)


def param_depth(name: str, n_layers: int) -> int:
    if name in ("cls_token", "pos_embed") or name.startswith("patch_embed."):
        return 0
    if name.startswith("blocks."):
        return int(name.split(".")[1]) + 1
    return n_layers + 1


def exempt_from_weight_decay(name: str) -> bool:
    """Biases, norm affine terms, tokens and positional embeddings are not decayed."""
    if name.endswith(".bias"):
        return True
    if name in ("cls_token", "pos_embed", "mask_token", "decoder_pos_embed"):
        return True
    parts = name.split(".")
    return len(parts) >= 2 and "norm" in parts[-2]


# --------------------------------------------------------------------------
# AdamW
# --------------------------------------------------------------------------


def init_moments(params: dict[str, torch.Tensor]) -> dict[str, dict[str, torch.Tensor]]:
    return {"m": {k: torch.zeros_like(v) for k, v in params.items()}, "v": {k: torch.zeros_like(v) for k, v in params.items()}}


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    moments: dict[str, dict[str, torch.Tensor]],
    opt: OptimizerConfig,
    lr_now: float,
    step: int,
    scale_per_group: dict[str, float] | None = None,
) -> None:
    """One in-place AdamW update; ``step`` is the 1-based update count for bias correction.

    Weight decay is decoupled: ``p *= 1 - lr * scale * wd`` before the Adam
    update, skipped for the exempt tensors.
    """
    bad = [n for n, g in grads.items() if not torch.isfinite(g).all()]
    if bad:
        raise FloatingPointError(f"non-finite gradient in {', '.join(bad[:5])}" + (" ..." if len(bad) > 5 else ""))
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        lr = lr_now * (1.0 if scale_per_group is None else scale_per_group[name])
        if opt.weight_decay and not exempt_from_weight_decay(name):
            p.mul_(1.0 - lr * opt.weight_decay)
        m, v = moments["m"][name], moments["v"][name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + opt.eps))


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _training_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def dataset_segments(dataset: Dataset, t_len: int) -> np.ndarray:
    return segment_batch(dataset.signals(), t_len)


def steps_per_epoch(n_records: int, batch_size: int) -> int:
    return max(1, math.ceil(n_records / batch_size))


# --------------------------------------------------------------------------
# pre-training
# --------------------------------------------------------------------------


def _pretrain_snapshot(model_cfg, target, ratio, opt, schedule, seed, epochs_done):
    return {
        "stage": "pretrain",
        "model": model_cfg.to_dict(),
        "target": {"name": target.name, "epsilon": target.epsilon},
        "masking_ratio": ratio,
        "optimizer": asdict(opt),
        "schedule": asdict(schedule),
        "seed": seed,
        "epochs_done": epochs_done,
    }


def pretrain(
    dataset: Dataset,
    model_cfg: ModelConfig,
    target: TargetKind,
    masking_ratio: float,
    opt: OptimizerConfig,
    schedule: ScheduleConfig,
    seed: int,
    *,
    dtype: torch.dtype = torch.float32,
    resume: Checkpoint | None = None,
    stop_after_epochs: int | None = None,
    on_epoch=None,
    on_step=None,
) -> Checkpoint:
    """Masked reconstruction training; returns the final checkpoint.

    Each visit of a record draws a fresh mask. ``schedule.steps_per_epoch``
    is derived from the dataset size and batch size. ``on_epoch(ckpt, row)``
    is called after every epoch with a checkpoint that resumes exactly from
    that point; ``stop_after_epochs`` ends the run early (the schedule is
    unchanged), which is how interrupted runs are simulated.
    """
    if not 0.0 <= masking_ratio < 1.0:
        raise ValueError(f"masking ratio must lie in [0, 1), got {masking_ratio}")
    n_mask = n_masked_for(model_cfg.t_len, masking_ratio)
    if n_mask >= model_cfg.t_len:
        raise ValueError("masking ratio leaves no unmasked segment for the encoder")
    if n_mask == 0:
        warnings.warn(f"degenerate config: masking ratio {masking_ratio} masks no segment of T={model_cfg.t_len}; loss is 0", stacklevel=2)

    segs = dataset_segments(dataset, model_cfg.t_len)
    if segs.shape[2] != model_cfg.d_seg:
        raise ValueError(f"dataset gives d_seg={segs.shape[2]}, model expects {model_cfg.d_seg}")
    schedule = replace(schedule, steps_per_epoch=steps_per_epoch(len(dataset), opt.batch_size))

    if resume is None:
        params = init_parameters(model_cfg, seed, dtype=dtype)
        moments = init_moments(params)
        rng = _training_rng(seed)
        step, start_epoch, history = 0, 0, []
    else:
        params = {k: v.clone() for k, v in resume.params.items()}
        moments = {g: {k: v.clone() for k, v in resume.moments[g].items()} for g in ("m", "v")}
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        step = resume.step
        start_epoch = resume.config["epochs_done"]
        history = list(resume.extra.get("history", []))

    end_epoch = schedule.total_epochs if stop_after_epochs is None else min(schedule.total_epochs, start_epoch + stop_after_epochs)
    for epoch in range(start_epoch, end_epoch):
        losses = []
        lr = 0.0
        for idx in _batches(len(dataset), opt.batch_size, rng):
            batch = segs[idx]
            plans = [sample_mask(model_cfg.t_len, masking_ratio, rng) for _ in idx]
            masked = gather_segments(batch, np.array([p.masked for p in plans], dtype=np.int64).reshape(len(idx), -1))
            targets = apply_target(masked.astype(np.float64), target)
            tr = trace(pretrain_loss, params, model_cfg, batch, plans, targets)
            loss = float(tr.output.detach())
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite pre-training loss at step {step}")
            grads = backward(tr)
            lr = cosine_lr(step, schedule, opt.base_lr)
            step += 1
            adamw_step(params, grads, moments, opt, lr, step)
            losses.append(loss)
            if on_step is not None:
                on_step(step, loss)
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses))}
        history.append(row)
        log.info("pretrain epoch %d lr %.3g loss %.6f", row["epoch"], lr, row["train_loss"])
        ckpt = Checkpoint(
            config=_pretrain_snapshot(model_cfg, target, masking_ratio, opt, schedule, seed, epoch + 1),
            params=params,
            moments=moments,
            step=step,
            rng_state=rng.bit_generator.state,
            extra={"history": history},
        )
        if on_epoch is not None:
            on_epoch(ckpt, row)

    return Checkpoint(
        config=_pretrain_snapshot(model_cfg, target, masking_ratio, opt, schedule, seed, end_epoch),
        params={k: v.clone() for k, v in params.items()},
        moments={g: {k: v.clone() for k, v in moments[g].items()} for g in ("m", "v")},
        step=step,
        rng_state=rng.bit_generator.state,
        extra={"history": list(history)},
    )


@torch.no_grad()
def reconstruction_loss(params, model_cfg: ModelConfig, dataset: Dataset, target: TargetKind, masking_ratio: float, seed: int = 0, batch_size: int = 64) -> float:
    """Masked reconstruction loss over a dataset with a fixed, seeded set of masks."""
    rng = np.random.default_rng(seed)
    segs = dataset_segments(dataset, model_cfg.t_len)
    total, count = 0.0, 0
    for start in range(0, len(segs), batch_size):
        batch = segs[start : start + batch_size]
        plans = [sample_mask(model_cfg.t_len, masking_ratio, rng) for _ in range(len(batch))]
        masked = gather_segments(batch, np.array([p.masked for p in plans], dtype=np.int64).reshape(len(batch), -1))
        loss = pretrain_loss(params, model_cfg, batch, plans, apply_target(masked.astype(np.float64), target))
        total += float(loss) * len(batch)
        count += len(batch)
    return total / count


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    params: dict[str, torch.Tensor]
    model_config: ModelConfig
    best_epoch: int
    best_val_f1: float
    history: list[dict]


@torch.no_grad()
def predict_logits(params, model_cfg: ModelConfig, segments: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [
        forward_classify(params, model_cfg, segments[i : i + batch_size]).double().numpy()
        for i in range(0, len(segments), batch_size)
    ]
    return np.concatenate(out) if out else np.zeros((0, model_cfg.n_labels))


def evaluate(params, model_cfg: ModelConfig, dataset: Dataset, threshold: float = 0.5):
    """Returns (EvalResult, mean BCE loss) in eval mode."""
    logits = predict_logits(params, model_cfg, dataset_segments(dataset, model_cfg.t_len))
    labels = dataset.label_matrix()
    bce = float(F.binary_cross_entropy_with_logits(torch.from_numpy(logits), torch.from_numpy(labels.astype(np.float64))))
    return macro_f1(threshold_logits(logits, threshold), labels), bce


def finetune_parameters(model_cfg: ModelConfig, seed: int, pretrained: dict | None, dtype: torch.dtype = torch.float32):
    """Fine-tune parameter set: encoder tensors (from ``pretrained`` when given) and a fresh head."""
    fresh = init_parameters(model_cfg, seed, dtype=dtype, scope="finetune_model")
    if pretrained is None:
        return fresh
    params = {}
    for name, value in fresh.items():
        if name.startswith(("head.", "fc_norm.")) or name not in pretrained:
            params[name] = value
        else:
            src = pretrained[name]
            if tuple(src.shape) != tuple(value.shape):
                raise ValueError(f"pretrained {name!r} has shape {tuple(src.shape)}, expected {tuple(value.shape)}")
            params[name] = src.detach().clone().to(dtype)
    return params


def finetune(
    train: Dataset,
    val: Dataset,
    cfg: FinetuneConfig,
    seed: int,
    *,
    model_cfg: ModelConfig | None = None,
    checkpoint: Checkpoint | None = None,
    test: Dataset | None = None,
    dtype: torch.dtype = torch.float32,
    on_epoch=None,
) -> FinetuneResult:
    """Supervised multi-label training with BCE; keeps the best-validation-macro-F1 epoch.

    Starts from ``checkpoint`` (pre-trained encoder) or, when it is None,
    from a fresh initialisation of ``model_cfg`` (training from scratch).
    """
    if checkpoint is not None:
        base_cfg = ModelConfig.from_dict(checkpoint.config["model"])
    elif model_cfg is not None:
        base_cfg = model_cfg
    else:
        raise ValueError("finetune needs a checkpoint or a model config")
    model_cfg = base_cfg.with_(droppath_rate=cfg.droppath_rate, classifier=cfg.classifier)
    if train.n_labels != model_cfg.n_labels or val.n_labels != model_cfg.n_labels:
        raise ValueError(f"label dimension mismatch: data has {train.n_labels}, head has {model_cfg.n_labels}")

    params = finetune_parameters(model_cfg, seed, None if checkpoint is None else checkpoint.params, dtype)
    assert not any(is_decoder_param(n) for n in params)
    assert set(params) == set(encoder_shapes(model_cfg))
    moments = init_moments(params)
    scales = {n: layerwise_lr_scale(param_depth(n, model_cfg.n_layers), model_cfg.n_layers, cfg.layer_decay) for n in params}
    opt = cfg.optimizer
    schedule = replace(cfg.schedule, steps_per_epoch=steps_per_epoch(len(train), opt.batch_size))

    rng = _training_rng(seed)
    segs = dataset_segments(train, model_cfg.t_len)
    labels = train.label_matrix().astype(np.float64)
    best = (-1.0, 0, params)
    history = []
    step = 0
    for epoch in range(schedule.total_epochs):
        losses, lr = [], 0.0
        for idx in _batches(len(train), opt.batch_size, rng):
            tr = trace(classify_loss, params, model_cfg, segs[idx], labels[idx], True, rng)
            loss = float(tr.output.detach())
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite fine-tuning loss at step {step}")
            grads = backward(tr)
            lr = cosine_lr(step, schedule, opt.base_lr)
            step += 1
            adamw_step(params, grads, moments, opt, lr, step, scales)
            losses.append(loss)
        res, val_loss = evaluate(params, model_cfg, val, cfg.threshold)
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "val_macro_f1": res.macro_f1}
        if res.macro_f1 > best[0]:
            best = (res.macro_f1, epoch + 1, {k: v.clone() for k, v in params.items()})
        if test is not None:
            row["test_macro_f1"] = evaluate(params, model_cfg, test, cfg.threshold)[0].macro_f1
            row["best_so_far_test_macro_f1"] = evaluate(best[2], model_cfg, test, cfg.threshold)[0].macro_f1
        history.append(row)
        log.info("finetune epoch %d lr %.3g loss %.5f val_f1 %.4f", epoch + 1, lr, row["train_loss"], res.macro_f1)
        if on_epoch is not None:
            on_epoch(row)
    return FinetuneResult(best[2], model_cfg, best[1], best[0], history)


def finetune_checkpoint(result: FinetuneResult, cfg: FinetuneConfig, seed: int) -> Checkpoint:
    return Checkpoint(
        config={
            "stage": "finetune",
            "model": result.model_config.to_dict(),
            "finetune": cfg.to_dict(),
            "seed": seed,
            "best_epoch": result.best_epoch,
        },
        params=copy.copy(result.params),
        extra={"history": result.history, "best_val_macro_f1": result.best_val_f1},
    )
