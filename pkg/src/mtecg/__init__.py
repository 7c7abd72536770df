"""Masked-autoencoder pre-training and fine-tuning of a ViT-style transformer on multi-lead ECG."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .metrics import EvalResult, macro_f1, threshold_logits
from .model import (
    ForwardTrace,
    ModelConfig,
    backward,
    count_parameters,
    decode,
    encode,
    forward_classify,
    init_parameters,
    variant_config,
)
from .segmentation import MaskPlan, SegmentSequence, reassemble, sample_mask, segment
from .signal_io import Dataset, DatasetError, EcgRecord, SplitSpec, generate_synthetic, load_dataset, save_dataset, split_dataset
from .targets import TargetKind, apply_target
from .training import (
    FinetuneConfig,
    OptimizerConfig,
    ScheduleConfig,
    adamw_step,
    cosine_lr,
    finetune,
    layerwise_lr_scale,
    pretrain,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
    "EvalResult",
    "macro_f1",
    "threshold_logits",
    "ForwardTrace",
    "ModelConfig",
    "backward",
    "count_parameters",
    "decode",
    "encode",
    "forward_classify",
    "init_parameters",
    "variant_config",
    "MaskPlan",
    "SegmentSequence",
    "reassemble",
    "sample_mask",
    "segment",
    "Dataset",
    "DatasetError",
    "EcgRecord",
    "SplitSpec",
    "generate_synthetic",
    "load_dataset",
    "save_dataset",
    "split_dataset",
    "TargetKind",
    "apply_target",
    "FinetuneConfig",
    "OptimizerConfig",
    "ScheduleConfig",
    "adamw_step",
    "cosine_lr",
    "finetune",
    "layerwise_lr_scale",
    "pretrain",
]
