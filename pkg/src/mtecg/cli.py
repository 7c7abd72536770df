"""Command-line entry point: synth, pretrain, finetune, eval, reconstruct, inspect."""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .metrics import write_report
from .model import (
    CLASSIFIER_ALIASES,
    REFERENCE_PARAMS,
    VARIANTS,
    ModelConfig,
    count_parameters,
    decode,
    encode,
    gather_segments,
    variant_config,
)
from .segmentation import n_masked_for, reassemble, sample_mask, segment
from .signal_io import DatasetError, SplitSpec, SyntheticConfig, generate_synthetic, load_dataset, save_dataset, split_dataset
from .targets import TargetKind, apply_target
from .training import (
    FinetuneConfig,
    OptimizerConfig,
    ScheduleConfig,
    evaluate,
    finetune,
    finetune_checkpoint,
    pretrain,
)

log = logging.getLogger("mtecg")

EXIT_BAD_CONFIG = 2
EXIT_MISSING_FILE = 3
EXIT_DEGENERATE = 4


class ConfigError(ValueError):
    pass


class DegenerateConfig(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "data": {"t_len": 200, "split": [0.8, 0.1, 0.1]},
    "model": {
        "variant": "T",
        "d_model": None,
        "n_heads": None,
        "n_layers": None,
        "d_decoder": 128,
        "decoder_heads": 4,
        "mlp_ratio": 4.0,
    },
    "pretrain": {
        "mask_ratio": 0.25,
        "target": "psn",
        "epsilon": 1e-6,
        "epochs": 1600,
        "warmup_epochs": 40,
        "lr": 1e-3,
        "min_lr": 0.0,
        "batch_size": 256,
        "beta1": 0.9,
        "beta2": 0.95,
        "weight_decay": 0.05,
        "split": "train",
        "checkpoint_every": 1,
    },
    "finetune": {
        "epochs": 50,
        "warmup_epochs": 5,
        "lr": 1e-3,
        "min_lr": 1e-6,
        "batch_size": 256,
        "beta1": 0.9,
        "beta2": 0.999,
        "weight_decay": 0.05,
        "droppath": 0.4,
        "layer_decay": 0.6,
        "classifier": "pool",
        "threshold": 0.5,
    },
    "synth": {
        "records": 64,
        "leads": 2,
        "samples": 400,
        "labels": 3,
        "sampling_rate_hz": 100,
        "noise_std": 0.02,
        "effect_strength": 1.0,
    },
}


# --------------------------------------------------------------------------
# config layering
# --------------------------------------------------------------------------


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            out[key] = _merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


# flag dest -> config path
_FLAG_PATHS = {
    "seed": ("seed",),
    "t_len": ("data", "t_len"),
    "variant": ("model", "variant"),
    "mask_ratio": ("pretrain", "mask_ratio"),
    "target": ("pretrain", "target"),
    "layer_decay": ("finetune", "layer_decay"),
    "droppath": ("finetune", "droppath"),
    "classifier": ("finetune", "classifier"),
    "records": ("synth", "records"),
    "leads": ("synth", "leads"),
    "samples": ("synth", "samples"),
    "labels": ("synth", "labels"),
}


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
    for dest, keys in _FLAG_PATHS.items():
        value = getattr(args, dest, None)
        if value is not None:
            node = cfg
            for k in keys[:-1]:
                node = node[k]
            node[keys[-1]] = value
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        stage = "finetune" if args.command == "finetune" else "pretrain"
        cfg[stage]["epochs"] = epochs
        cfg[stage]["warmup_epochs"] = min(cfg[stage]["warmup_epochs"], epochs)
    return cfg


def model_config_from(cfg: dict, d_seg: int, n_labels: int) -> ModelConfig:
    m = cfg["model"]
    t_len = cfg["data"]["t_len"]
    try:
        if m.get("variant"):
            overrides = {k: m[k] for k in ("d_model", "n_heads", "n_layers") if m.get(k) is not None}
            base = variant_config(m["variant"], t_len, d_seg, n_labels, m["d_decoder"], m["decoder_heads"], mlp_ratio=m["mlp_ratio"])
            return base.with_(**overrides)
        return ModelConfig(
            t_len=t_len,
            d_seg=d_seg,
            d_model=m["d_model"],
            n_heads=m["n_heads"],
            n_layers=m["n_layers"],
            d_decoder=m["d_decoder"],
            decoder_heads=m["decoder_heads"],
            n_labels=n_labels,
            mlp_ratio=m["mlp_ratio"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model config: {exc}") from exc


def _write_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _load_data(path):
    if path is None:
        raise ConfigError("--data is required")
    return load_dataset(path)


def _check_t_len(dataset, t_len):
    q = dataset.records[0].q_samples
    if t_len < 1 or q % t_len:
        raise ConfigError(f"Q={q} is not divisible by T={t_len}")
    return dataset.records[0].k_leads * q // t_len


def _split(dataset, cfg):
    fr = cfg["data"]["split"]
    try:
        return split_dataset(dataset, SplitSpec(fr[0], fr[1], fr[2], cfg["seed"]))
    except ValueError as exc:
        raise DegenerateConfig(str(exc)) from exc


def _write_log(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args, cfg):
    s = cfg["synth"]
    syn = SyntheticConfig(
        sampling_rate_hz=s["sampling_rate_hz"], noise_std=s["noise_std"], effect_strength=s["effect_strength"]
    )
    try:
        ds = generate_synthetic(s["records"], s["leads"], s["samples"], s["labels"], cfg["seed"], syn, t_len=cfg["data"]["t_len"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    _write_config(out, cfg)
    path = save_dataset(ds, out)
    print(f"wrote {len(ds)} records to {path}")


def cmd_pretrain(args, cfg):
    dataset = _load_data(args.data)
    d_seg = _check_t_len(dataset, cfg["data"]["t_len"])
    model_cfg = model_config_from(cfg, d_seg, dataset.n_labels)
    p = cfg["pretrain"]
    if p["split"] == "train":
        dataset = _split(dataset, cfg)[0]
    elif p["split"] != "all":
        raise ConfigError(f"pretrain.split must be 'train' or 'all', got {p['split']!r}")
    n_mask = n_masked_for(model_cfg.t_len, p["mask_ratio"])
    if not 0.0 <= p["mask_ratio"] < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {p['mask_ratio']}")
    if n_mask == 0 or n_mask >= model_cfg.t_len:
        raise DegenerateConfig(f"mask ratio {p['mask_ratio']} masks {n_mask} of T={model_cfg.t_len} segments")
    try:
        target = TargetKind.parse(p["target"], p["epsilon"])
        opt = OptimizerConfig(p["beta1"], p["beta2"], p["weight_decay"], p["lr"], p["batch_size"])
        schedule = ScheduleConfig(p["epochs"], p["warmup_epochs"], 1, p["min_lr"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    out = Path(args.out)
    _write_config(out, cfg)
    ckpt_dir = out / "checkpoints"
    resume = load_checkpoint(args.resume) if args.resume else None
    every = max(1, int(p["checkpoint_every"]))

    def on_epoch(ckpt, row):
        _write_log(out / "logs.csv", ckpt.extra["history"], ["epoch", "lr", "train_loss"])
        epoch = row["epoch"]
        if epoch % every == 0 or epoch == p["epochs"]:
            save_checkpoint(ckpt, ckpt_dir / f"epoch_{epoch:04d}.ckpt")

    ckpt = pretrain(dataset, model_cfg, target, p["mask_ratio"], opt, schedule, cfg["seed"], resume=resume, on_epoch=on_epoch)
    save_checkpoint(ckpt, ckpt_dir / "last.ckpt")
    _write_log(out / "logs.csv", ckpt.extra["history"], ["epoch", "lr", "train_loss"])
    print(f"pretrained {len(ckpt.extra['history'])} epochs; final loss {ckpt.extra['history'][-1]['train_loss']:.6g}" if ckpt.extra["history"] else "no epochs run")


def _finetune_config(cfg) -> FinetuneConfig:
    f = cfg["finetune"]
    classifier = CLASSIFIER_ALIASES.get(f["classifier"])
    if classifier is None:
        raise ConfigError(f"classifier must be pool or token, got {f['classifier']!r}")
    try:
        return FinetuneConfig(
            optimizer=OptimizerConfig(f["beta1"], f["beta2"], f["weight_decay"], f["lr"], f["batch_size"]),
            schedule=ScheduleConfig(f["epochs"], f["warmup_epochs"], 1, f["min_lr"]),
            droppath_rate=f["droppath"],
            layer_decay=f["layer_decay"],
            classifier=classifier,
            threshold=f["threshold"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_finetune(args, cfg):
    dataset = _load_data(args.data)
    if args.from_scratch == bool(args.checkpoint):
        raise ConfigError("give exactly one of --checkpoint or --from-scratch")
    checkpoint = None
    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        cfg["data"]["t_len"] = checkpoint.config["model"]["t_len"]
    d_seg = _check_t_len(dataset, cfg["data"]["t_len"])
    model_cfg = None if checkpoint else model_config_from(cfg, d_seg, dataset.n_labels)
    if checkpoint and checkpoint.config["model"]["n_labels"] != dataset.n_labels:
        raise ConfigError(f"label dimension mismatch: data has {dataset.n_labels}, checkpoint head has {checkpoint.config['model']['n_labels']}")
    ft = _finetune_config(cfg)
    train, val, test = _split(dataset, cfg)

    out = Path(args.out)
    _write_config(out, cfg)
    rows = []
    columns = ["epoch", "lr", "train_loss", "val_loss", "val_macro_f1"]

    def on_epoch(row):
        rows.append(row)
        _write_log(out / "logs.csv", rows, columns)

    try:
        result = finetune(train, val, ft, cfg["seed"], model_cfg=model_cfg, checkpoint=checkpoint, on_epoch=on_epoch)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    save_checkpoint(finetune_checkpoint(result, ft, cfg["seed"]), out / "checkpoints" / "best.ckpt")
    res, _ = evaluate(result.params, result.model_config, test, ft.threshold)
    write_report(res, dataset.label_names, out / "report.csv")
    print(f"best epoch {result.best_epoch}: val macro F1 {result.best_val_f1:.4f}; test macro F1 {res.macro_f1:.4f}")


def _finetuned_model(path):
    ckpt = load_checkpoint(path)
    if ckpt.config.get("stage") != "finetune":
        raise ConfigError(f"{path} is not a fine-tuned checkpoint")
    return ckpt, ModelConfig.from_dict(ckpt.config["model"])


def cmd_eval(args, cfg):
    dataset = _load_data(args.data)
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    ckpt, model_cfg = _finetuned_model(args.checkpoint)
    cfg["data"]["t_len"] = model_cfg.t_len
    _check_t_len(dataset, model_cfg.t_len)
    if dataset.n_labels != model_cfg.n_labels:
        raise ConfigError(f"label dimension mismatch: data has {dataset.n_labels}, model has {model_cfg.n_labels}")
    if args.split != "all":
        dataset = dict(zip(("train", "val", "test"), _split(dataset, cfg)))[args.split]
    threshold = ckpt.config.get("finetune", {}).get("threshold", 0.5)
    res, bce = evaluate(ckpt.params, model_cfg, dataset, threshold)
    out = Path(args.out)
    _write_config(out, cfg)
    write_report(res, dataset.label_names, out / "report.csv")
    print(f"{args.split}: {len(dataset)} records, macro F1 {res.macro_f1:.4f}, BCE {bce:.4f}")


def cmd_reconstruct(args, cfg):
    dataset = _load_data(args.data)
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.config.get("stage") != "pretrain":
        raise ConfigError(f"{args.checkpoint} is not a pre-training checkpoint")
    model_cfg = ModelConfig.from_dict(ckpt.config["model"])
    p = cfg["pretrain"]
    target = TargetKind.parse(args.target or ckpt.config["target"]["name"], ckpt.config["target"]["epsilon"])
    ratio = args.mask_ratio if args.mask_ratio is not None else ckpt.config["masking_ratio"]
    n_mask = n_masked_for(model_cfg.t_len, ratio)
    if n_mask == 0 or n_mask >= model_cfg.t_len:
        raise DegenerateConfig(f"mask ratio {ratio} masks {n_mask} of T={model_cfg.t_len} segments")
    del p
    by_id = {r.id: r for r in dataset.records}
    ids = args.records or [dataset.records[0].id]
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ConfigError(f"unknown record ids: {', '.join(missing)}")

    out = Path(args.out)
    _write_config(out, cfg)
    rng = np.random.default_rng(cfg["seed"])
    for rid in ids:
        rec = by_id[rid]
        seq = segment(rec.signal, model_cfg.t_len)
        plan = sample_mask(model_cfg.t_len, ratio, rng)
        segs = seq.segments[None]
        keep = np.array([plan.unmasked])
        masked = gather_segments(segs, np.array([plan.masked]))[0]
        tgt = apply_target(masked.astype(np.float64), target)
        with torch.no_grad():
            z = encode(ckpt.params, model_cfg, segs[0][list(plan.unmasked)], keep[0])
            pred = decode(ckpt.params, model_cfg, z[1:], plan).double().numpy()
        # Per-segment series: target/reconstruction live in target space.
        tgt_full = np.full(seq.segments.shape, np.nan)
        rec_full = np.full(seq.segments.shape, np.nan)
        tgt_full[list(plan.masked)] = tgt
        rec_full[list(plan.masked)] = pred
        k, q = rec.signal.shape
        tgt_sig = reassemble(tgt_full, q, k)
        rec_sig = reassemble(rec_full, q, k)
        seg_len = q // model_cfg.t_len
        is_masked = np.zeros(model_cfg.t_len, dtype=bool)
        is_masked[list(plan.masked)] = True
        with open(out / f"{rid}_reconstruction.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lead", "sample", "segment", "masked", "original", "target", "reconstruction"])
            for lead in range(k):
                for s in range(q):
                    t = s // seg_len
                    w.writerow(
                        [lead, s, t, int(is_masked[t]), f"{rec.signal[lead, s]:.7g}",
                         "" if not is_masked[t] else f"{tgt_sig[lead, s]:.7g}",
                         "" if not is_masked[t] else f"{rec_sig[lead, s]:.7g}"]
                    )
        (out / f"{rid}_mask.json").write_text(
            json.dumps({"record": rid, "t_len": model_cfg.t_len, "target": target.short_name, "unmasked": plan.unmasked, "masked": plan.masked}) + "\n"
        )
        print(f"{rid}: {plan.n_masked} masked segments written")


def cmd_inspect(args, cfg):
    labels = args.labels if args.labels is not None else 28
    t_len = args.t_len if args.t_len is not None else 200
    d_seg = args.d_seg
    if args.config and not args.variant:
        model_cfg = model_config_from(cfg, d_seg, labels)
    else:
        name = args.variant or cfg["model"]["variant"]
        try:
            model_cfg = variant_config(name, t_len, d_seg, labels)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    ft = count_parameters(model_cfg, "finetune_model")
    pt = count_parameters(model_cfg, "pretrain_model")
    label = f"MTECG-{args.variant.upper()}" if args.variant else "custom"
    print(f"{label}: D={model_cfg.d_model} h={model_cfg.n_heads} L={model_cfg.n_layers} T={model_cfg.t_len} d_seg={model_cfg.d_seg} C={model_cfg.n_labels}")
    print(f"finetune_model parameters: {ft} ({ft / 1e6:.1f}M)")
    print(f"pretrain_model parameters: {pt} ({pt / 1e6:.1f}M)")
    if args.variant and args.variant.upper() in REFERENCE_PARAMS:
        print(f"reference: {REFERENCE_PARAMS[args.variant.upper()] / 1e6:.1f}M")


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int, help="unsigned integer seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--variant", choices=sorted(VARIANTS), type=str.upper, help="named architecture variant")
    common.add_argument("--t-len", dest="t_len", type=int, help="number of segments T")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(prog="mtecg", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--records", type=int)
    p.add_argument("--leads", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--labels", type=int)

    for name, helptext in (("pretrain", "masked pre-training"), ("finetune", "supervised fine-tuning"), ("eval", "metrics report on a split"), ("reconstruct", "dump masked reconstructions")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", help="dataset manifest.json")
        if name in ("pretrain", "reconstruct"):
            p.add_argument("--mask-ratio", dest="mask_ratio", type=float)
            p.add_argument("--target", choices=["identity", "psn", "ssqrt"])
        if name in ("pretrain", "finetune"):
            p.add_argument("--epochs", type=int)
        if name == "pretrain":
            p.add_argument("--resume", help="resume from a pre-training checkpoint")
        if name in ("finetune", "eval", "reconstruct"):
            p.add_argument("--checkpoint", help="checkpoint file")
        if name == "finetune":
            p.add_argument("--from-scratch", action="store_true", help="train without a pre-trained checkpoint")
            p.add_argument("--layer-decay", dest="layer_decay", type=float)
            p.add_argument("--droppath", type=float)
            p.add_argument("--classifier", choices=["pool", "token"])
        if name == "eval":
            p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
        if name == "reconstruct":
            p.add_argument("--records", nargs="+", help="record ids to dump")

    p = sub.add_parser("inspect", parents=[common], help="print parameter counts")
    p.add_argument("--labels", type=int)
    p.add_argument("--d-seg", dest="d_seg", type=int, default=300)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "reconstruct": cmd_reconstruct,
    "inspect": cmd_inspect,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if cfg["seed"] < 0:
            raise ConfigError("seed must be unsigned")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            COMMANDS[args.command](args, cfg)
    except (FileNotFoundError, DatasetError) as exc:
        code = EXIT_MISSING_FILE if isinstance(exc, FileNotFoundError) or "not found" in str(exc) else EXIT_BAD_CONFIG
        print(f"mtecg: error: {exc}", file=sys.stderr)
        return code
    except DegenerateConfig as exc:
        print(f"mtecg: degenerate config: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ConfigError, CheckpointError) as exc:
        print(f"mtecg: bad config: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
