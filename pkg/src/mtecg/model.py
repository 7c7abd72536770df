"""Masked time-series transformer: encoder, one-block decoder and classifier heads.

Parameters live in a flat ``dict[str, torch.Tensor]`` (the parameter store)
and every forward function is a pure function of that dict, so the same code
serves plain inference, training and finite-difference checks. Reverse-mode
differentiation goes through :class:`ForwardTrace` / :func:`backward`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .segmentation import MaskPlan

CLASSIFIERS = ("global_pool", "aux_token")
CLASSIFIER_ALIASES = {"pool": "global_pool", "global_pool": "global_pool", "token": "aux_token", "aux_token": "aux_token"}

# name -> (d_model, n_heads); all variants use 12 blocks and D/h = 64.
VARIANTS = {
    "A": (64, 1),
    "M": (128, 2),
    "T": (192, 3),
    "S": (384, 6),
    "B": (768, 12),
}
REFERENCE_PARAMS = {"A": 0.9e6, "M": 2.7e6, "T": 5.7e6, "S": 21.8e6, "B": 85.8e6}


@dataclass(frozen=True)
class ModelConfig:
    t_len: int
    d_seg: int
    d_model: int
    n_heads: int
    n_layers: int
    d_decoder: int
    decoder_heads: int
    n_labels: int
    mlp_ratio: float = 4.0
    droppath_rate: float = 0.0
    classifier: str = "global_pool"
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("t_len", "d_seg", "d_model", "n_heads", "n_layers", "d_decoder", "decoder_heads", "n_labels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_decoder % self.decoder_heads:
            raise ValueError(f"d_decoder={self.d_decoder} not divisible by decoder_heads={self.decoder_heads}")
        if not 0.0 <= self.droppath_rate < 1.0:
            raise ValueError("droppath_rate must lie in [0, 1)")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.classifier not in CLASSIFIERS:
            raise ValueError(f"classifier must be one of {CLASSIFIERS}, got {self.classifier!r}")

    @property
    def mlp_hidden(self) -> int:
        return int(self.d_model * self.mlp_ratio)

    @property
    def decoder_mlp_hidden(self) -> int:
        return int(self.d_decoder * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def variant_config(
    name: str,
    t_len: int = 200,
    d_seg: int = 300,
    n_labels: int = 28,
    d_decoder: int = 128,
    decoder_heads: int = 4,
    **overrides,
) -> ModelConfig:
    """Named size variant (A, M, T, S, B) with the default decoder (D'=128, 4 heads)."""
    key = name.upper().removeprefix("MTECG-")
    if key not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    d_model, n_heads = VARIANTS[key]
    return ModelConfig(
        t_len=t_len,
        d_seg=d_seg,
        d_model=d_model,
        n_heads=n_heads,
        n_layers=12,
        d_decoder=d_decoder,
        decoder_heads=decoder_heads,
        n_labels=n_labels,
        **overrides,
    )


# --------------------------------------------------------------------------
# parameter store
# --------------------------------------------------------------------------


def _block_shapes(prefix: str, d: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.norm1.weight": (d,),
        f"{prefix}.norm1.bias": (d,),
        f"{prefix}.attn.qkv.weight": (d, 3 * d),
        f"{prefix}.attn.qkv.bias": (3 * d,),
        f"{prefix}.attn.proj.weight": (d, d),
        f"{prefix}.attn.proj.bias": (d,),
        f"{prefix}.norm2.weight": (d,),
        f"{prefix}.norm2.bias": (d,),
        f"{prefix}.mlp.fc1.weight": (d, hidden),
        f"{prefix}.mlp.fc1.bias": (hidden,),
        f"{prefix}.mlp.fc2.weight": (hidden, d),
        f"{prefix}.mlp.fc2.bias": (d,),
    }


def encoder_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of the fine-tune model: embeddings, encoder blocks, norms and head."""
    d = config.d_model
    shapes = {
        "patch_embed.weight": (config.d_seg, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (config.t_len + 1, d),
    }
    for i in range(config.n_layers):
        shapes.update(_block_shapes(f"blocks.{i}", d, config.mlp_hidden))
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    if config.classifier == "global_pool":
        shapes["fc_norm.weight"] = (d,)
        shapes["fc_norm.bias"] = (d,)
    shapes["head.weight"] = (d, config.n_labels)
    shapes["head.bias"] = (config.n_labels,)
    return shapes


def decoder_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    dd = config.d_decoder
    shapes = {
        "decoder_embed.weight": (config.d_model, dd),
        "decoder_embed.bias": (dd,),
        "mask_token": (dd,),
        "decoder_pos_embed": (config.t_len, dd),
    }
    shapes.update(_block_shapes("decoder_blocks.0", dd, config.decoder_mlp_hidden))
    shapes["decoder_norm.weight"] = (dd,)
    shapes["decoder_norm.bias"] = (dd,)
    shapes["decoder_pred.weight"] = (dd, config.d_seg)
    shapes["decoder_pred.bias"] = (config.d_seg,)
    return shapes


def is_decoder_param(name: str) -> bool:
    return name.startswith("decoder") or name == "mask_token"


def param_shapes(config: ModelConfig, scope: str = "pretrain_model") -> dict[str, tuple[int, ...]]:
    if scope not in ("finetune_model", "pretrain_model"):
        raise ValueError(f"unknown scope {scope!r}")
    shapes = encoder_shapes(config)
    if scope == "pretrain_model":
        shapes.update(decoder_shapes(config))
    return shapes


def count_parameters(config: ModelConfig, scope: str = "finetune_model") -> int:
    """Trainable parameter count of the fine-tune model or the full pre-training model."""
    return sum(math.prod(s) for s in param_shapes(config, scope).values())


def _init_kind(name: str) -> str:
    if name.startswith("head."):
        return "zeros"
    if name.endswith(".bias"):
        return "zeros"
    parts = name.split(".")
    if parts[-1] == "weight" and "norm" in parts[-2]:
        return "ones"
    return "trunc_normal"


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def init_parameters(
    config: ModelConfig,
    seed: int,
    dtype: torch.dtype = torch.float32,
    scope: str = "pretrain_model",
) -> dict[str, torch.Tensor]:
    """Truncated-normal (std 0.02, cut at 2 std) weights, zero biases and head, unit norm scales.

    Values are drawn in float64 from a seeded generator in a fixed name order,
    so the store is identical for a given seed regardless of ``dtype``.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, scope).items():
        kind = _init_kind(name)
        if kind == "zeros":
            value = np.zeros(shape)
        elif kind == "ones":
            value = np.ones(shape)
        else:
            value = _trunc_normal(rng, shape)
        params[name] = torch.as_tensor(value, dtype=dtype)
    return params


def check_parameters(params: dict[str, torch.Tensor], config: ModelConfig, scope: str = "finetune_model") -> None:
    for name, shape in param_shapes(config, scope).items():
        if name not in params:
            raise KeyError(f"parameter {name!r} missing")
        if tuple(params[name].shape) != shape:
            raise ValueError(f"parameter {name!r} has shape {tuple(params[name].shape)}, expected {shape}")
        if not torch.isfinite(params[name]).all():
            raise ValueError(f"parameter {name!r} is not finite")


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def _linear(x, p, prefix):
    return x @ p[f"{prefix}.weight"] + p[f"{prefix}.bias"]


def _norm(x, p, prefix, eps):
    return F.layer_norm(x, (x.shape[-1],), p[f"{prefix}.weight"], p[f"{prefix}.bias"], eps)


def _attention(x, p, prefix, n_heads):
    b, n, d = x.shape
    dh = d // n_heads
    qkv = _linear(x, p, f"{prefix}.qkv").reshape(b, n, 3, n_heads, dh).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = torch.softmax((q @ k.transpose(-2, -1)) * dh**-0.5, dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(b, n, d)
    return _linear(out, p, f"{prefix}.proj")


def _drop_path(x, rate, train_mode, rng):
    if not train_mode or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape[0]) < keep).astype(np.float64) / keep
    return x * torch.as_tensor(mask, dtype=x.dtype).reshape(-1, *([1] * (x.dim() - 1)))


def _block(x, p, prefix, n_heads, eps, drop_rate=0.0, train_mode=False, rng=None):
    x = x + _drop_path(_attention(_norm(x, p, f"{prefix}.norm1", eps), p, f"{prefix}.attn", n_heads), drop_rate, train_mode, rng)
    h = F.gelu(_linear(_norm(x, p, f"{prefix}.norm2", eps), p, f"{prefix}.mlp.fc1"))
    return x + _drop_path(_linear(h, p, f"{prefix}.mlp.fc2"), drop_rate, train_mode, rng)


def droppath_schedule(config: ModelConfig) -> np.ndarray:
    """Per-block drop rate, linear from 0 at the first block to the configured rate at the last."""
    return np.linspace(0.0, config.droppath_rate, config.n_layers)


def _as_tensor(x, dtype):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _dtype_of(params):
    return params["pos_embed"].dtype


# --------------------------------------------------------------------------
# encoder / decoder / classifier
# --------------------------------------------------------------------------


def encode(params, config: ModelConfig, segments, indices, train_mode: bool = False, rng=None) -> torch.Tensor:
    """Encode a subset of segments placed at ``indices`` (0-based positions).

    ``segments`` is (S, d_seg) or batched (B, S, d_seg) with matching
    ``indices``. Returns (S+1, D) tokens (batched: (B, S+1, D)); token 0 is
    the encoded auxiliary token. Indices need only be distinct, so supplying
    (segment, index) pairs in another order permutes tokens 1..S the same way.
    """
    dtype = _dtype_of(params)
    x = _as_tensor(segments, dtype)
    idx = torch.as_tensor(np.array(indices, dtype=np.int64))
    single = x.dim() == 2
    if single:
        x, idx = x.unsqueeze(0), idx.unsqueeze(0)
    b, s, d_seg = x.shape
    if d_seg != config.d_seg:
        raise ValueError(f"segment dimension {d_seg} != d_seg={config.d_seg}")
    if idx.shape != (b, s):
        raise ValueError(f"indices shape {tuple(idx.shape)} does not match segments {(b, s)}")
    if not 1 <= s <= config.t_len:
        raise ValueError(f"encoder needs 1 <= S <= T={config.t_len}, got S={s}")
    if s and (idx.min() < 0 or idx.max() >= config.t_len):
        raise IndexError(f"segment index out of range 0..{config.t_len - 1}")
    if s > 1 and (idx.sort(dim=1).values.diff(dim=1) == 0).any():
        raise ValueError("segment indices must be distinct")
    if train_mode and config.droppath_rate > 0 and rng is None:
        raise ValueError("train_mode with DropPath requires an rng")

    p = params
    pos = p["pos_embed"]
    tokens = x @ p["patch_embed.weight"] + p["patch_embed.bias"] + pos[idx + 1]
    cls = (p["cls_token"] + pos[0]).expand(b, 1, config.d_model)
    z = torch.cat([cls, tokens], dim=1)
    for i, rate in enumerate(droppath_schedule(config)):
        z = _block(z, p, f"blocks.{i}", config.n_heads, config.norm_eps, float(rate), train_mode, rng)
    z = _norm(z, p, "norm", config.norm_eps)
    return z[0] if single else z


def _plan_arrays(plans, batch: int):
    if isinstance(plans, MaskPlan):
        plans = [plans]
    if len(plans) != batch:
        raise ValueError(f"{len(plans)} mask plans for batch of {batch}")
    n_keep = {pl.n_unmasked for pl in plans}
    n_mask = {pl.n_masked for pl in plans}
    if len(n_keep) != 1 or len(n_mask) != 1:
        raise ValueError("all plans in a batch must mask the same number of segments")
    keep = np.array([pl.unmasked for pl in plans], dtype=np.int64).reshape(batch, -1)
    mask = np.array([pl.masked for pl in plans], dtype=np.int64).reshape(batch, -1)
    return keep, mask


def decode(params, config: ModelConfig, encoded_unmasked, plans) -> torch.Tensor:
    """Reconstruct masked segments from encoded unmasked tokens.

    The decoder sequence is the projected unmasked tokens followed by one
    mask embedding per masked position, each plus the decoder positional
    embedding of its original index; one block, a norm, then the output
    projection on the masked positions. Returns (S', d_seg) or (B, S', d_seg).
    """
    dtype = _dtype_of(params)
    z = _as_tensor(encoded_unmasked, dtype)
    single = z.dim() == 2
    if single:
        z = z.unsqueeze(0)
    b, s, _ = z.shape
    keep, mask = _plan_arrays(plans, b)
    if keep.shape[1] != s:
        raise ValueError(f"plan has {keep.shape[1]} unmasked segments, got {s} encoded tokens")
    n_mask = mask.shape[1]
    if n_mask == 0:
        out = z.new_zeros((b, 0, config.d_seg))
        return out[0] if single else out

    p = params
    y = _linear(z, p, "decoder_embed")
    m = p["mask_token"].expand(b, n_mask, config.d_decoder)
    order = torch.as_tensor(np.concatenate([keep, mask], axis=1))
    tokens = torch.cat([y, m], dim=1) + p["decoder_pos_embed"][order]
    tokens = _block(tokens, p, "decoder_blocks.0", config.decoder_heads, config.norm_eps)
    tokens = _norm(tokens, p, "decoder_norm", config.norm_eps)
    out = _linear(tokens[:, s:], p, "decoder_pred")
    return out[0] if single else out


def pooled_features(params, config: ModelConfig, encoded) -> torch.Tensor:
    if config.classifier == "global_pool":
        return _norm(encoded[..., 1:, :].mean(dim=-2), params, "fc_norm", config.norm_eps)
    return encoded[..., 0, :]


def forward_classify(params, config: ModelConfig, segments, train_mode: bool = False, rng=None, indices=None) -> torch.Tensor:
    """Logits (C,) for one full segment sequence (T, d_seg), or (B, C) for a batch."""
    x = _as_tensor(segments, _dtype_of(params))
    if x.shape[-2] != config.t_len:
        raise ValueError(f"expected T={config.t_len} segments, got {x.shape[-2]}")
    if indices is None:
        indices = np.broadcast_to(np.arange(config.t_len), x.shape[:-1])
    z = encode(params, config, x, indices, train_mode, rng)
    return _linear(pooled_features(params, config, z), params, "head")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def gather_segments(segments: np.ndarray, index: np.ndarray) -> np.ndarray:
    """segments (B, T, d), index (B, n) -> (B, n, d)."""
    return np.take_along_axis(segments, index[..., None], axis=1)


def pretrain_loss(params, config: ModelConfig, segments, plans, targets) -> torch.Tensor:
    """Squared reconstruction error summed over each masked segment, averaged over segments and batch.

    ``segments`` (B, T, d_seg) are the raw segment sequences, ``targets``
    (B, S', d_seg) the transformed masked segments. Returns exactly 0 when
    nothing is masked.
    """
    segments = np.asarray(segments)
    keep, mask = _plan_arrays(plans, segments.shape[0])
    dtype = _dtype_of(params)
    if mask.shape[1] == 0:
        return params["pos_embed"].sum() * 0.0
    z = encode(params, config, gather_segments(segments, keep), keep)
    pred = decode(params, config, z[:, 1:], plans)
    err = pred - _as_tensor(targets, dtype)
    return (err**2).sum(dim=-1).mean()


def classify_loss(params, config: ModelConfig, segments, labels, train_mode: bool = False, rng=None) -> torch.Tensor:
    """Mean binary cross-entropy over labels and batch, computed from logits."""
    logits = forward_classify(params, config, segments, train_mode, rng)
    y = _as_tensor(labels, logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, y)


# --------------------------------------------------------------------------
# reverse mode
# --------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Output of a recorded forward pass and the parameter leaves it depends on."""

    output: torch.Tensor
    leaves: dict[str, torch.Tensor]
    consumed: bool = False


def trace(fn, params, *args, **kwargs) -> ForwardTrace:
    """Run ``fn(params, *args, **kwargs)`` recording the graph for :func:`backward`."""
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    with torch.enable_grad():
        out = fn(leaves, *args, **kwargs)
    return ForwardTrace(out, leaves)


def backward(tr: ForwardTrace, loss_gradient=1.0) -> dict[str, torch.Tensor]:
    """Gradients of ``<loss_gradient, output>`` for every parameter in the trace.

    Tensors that do not influence the output get zero gradients of their own
    shape. A trace can be differentiated once.
    """
    if tr.consumed:
        raise RuntimeError("forward trace already consumed")
    tr.consumed = True
    names = list(tr.leaves)
    grad_out = torch.as_tensor(loss_gradient, dtype=tr.output.dtype).expand_as(tr.output)
    if not tr.output.requires_grad:
        return {n: torch.zeros_like(tr.leaves[n]) for n in names}
    grads = torch.autograd.grad(
        tr.output, [tr.leaves[n] for n in names], grad_outputs=grad_out, allow_unused=True
    )
    return {
        n: (torch.zeros_like(tr.leaves[n]) if g is None else g.detach()) for n, g in zip(names, grads)
    }
