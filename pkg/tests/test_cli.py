import csv
import json

import pytest

from mtecg.cli import build_parser, run

TOY = {
    "data": {"t_len": 20},
    "model": {"variant": None, "d_model": 32, "n_heads": 2, "n_layers": 2, "d_decoder": 16, "decoder_heads": 2},
    "pretrain": {"epochs": 2, "warmup_epochs": 1, "batch_size": 16, "target": "identity"},
    "finetune": {"epochs": 2, "warmup_epochs": 1, "batch_size": 16},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "toy.json").write_text(json.dumps(TOY))
    assert run(["synth", "--records", "40", "--seed", "7", "--out", str(root / "data")]) == 0
    return root


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["--help"])
    assert exc.value.code == 0
    for sub in ("pretrain", "finetune"):
        with pytest.raises(SystemExit) as exc:
            run([sub, "--help"])
        assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out", "--variant", "--mask-ratio", "--target", "--epochs", "--layer-decay", "--droppath", "--classifier", "--from-scratch"):
        assert flag in out, flag


def test_synth_twice_identical(tmp_path):
    for name in ("a", "b"):
        assert run(["synth", "--records", "4", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 6  # config, manifest, 4 signals
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_pretrain_one_epoch_default_config(workdir):
    out = workdir / "pt1"
    assert run(["pretrain", "--data", str(workdir / "data/manifest.json"), "--epochs", "1", "--out", str(out)]) == 0
    rows = _rows(out / "logs.csv")
    assert len(rows) == 1 and list(rows[0]) == ["epoch", "lr", "train_loss"]
    assert (out / "checkpoints" / "last.ckpt").is_file()
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["pretrain"]["epochs"] == 1 and cfg["model"]["variant"] == "T"


def test_flags_override_config_file(workdir):
    out = workdir / "pt_override"
    argv = ["pretrain", "--data", str(workdir / "data/manifest.json"), "--config", str(workdir / "toy.json"), "--mask-ratio", "0.5", "--target", "ssqrt", "--seed", "3", "--out", str(out)]
    assert run(argv) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["pretrain"]["mask_ratio"] == 0.5 and cfg["pretrain"]["target"] == "ssqrt"
    assert cfg["seed"] == 3 and cfg["model"]["d_model"] == 32 and cfg["pretrain"]["epochs"] == 2


def test_reproducible_logs(workdir):
    logs = []
    for name in ("r1", "r2"):
        out = workdir / name
        assert run(["pretrain", "--data", str(workdir / "data/manifest.json"), "--config", str(workdir / "toy.json"), "--out", str(out)]) == 0
        logs.append((out / "logs.csv").read_bytes())
    assert logs[0] == logs[1]


def test_full_pipeline(workdir, capsys):
    data = str(workdir / "data/manifest.json")
    toy = str(workdir / "toy.json")
    pt = workdir / "pt"
    assert run(["pretrain", "--data", data, "--config", toy, "--out", str(pt)]) == 0
    assert sorted(p.name for p in (pt / "checkpoints").iterdir()) == ["epoch_0001.ckpt", "epoch_0002.ckpt", "last.ckpt"]

    ft = workdir / "ft"
    argv = ["finetune", "--data", data, "--config", toy, "--checkpoint", str(pt / "checkpoints/last.ckpt"), "--classifier", "token", "--layer-decay", "0.8", "--droppath", "0.2", "--out", str(ft)]
    assert run(argv) == 0
    rows = _rows(ft / "logs.csv")
    assert len(rows) == 2 and list(rows[0]) == ["epoch", "lr", "train_loss", "val_loss", "val_macro_f1"]
    report = _rows(ft / "report.csv")
    assert [r["label_name"] for r in report][-1] == "macro_f1" and len(report) == 4
    cfg = json.loads((ft / "config.json").read_text())
    assert cfg["finetune"]["classifier"] == "token" and cfg["finetune"]["layer_decay"] == 0.8

    ev = workdir / "ev"
    assert run(["eval", "--data", data, "--checkpoint", str(ft / "checkpoints/best.ckpt"), "--out", str(ev)]) == 0
    assert (ev / "report.csv").read_text() == (ft / "report.csv").read_text()

    rc = workdir / "rc"
    assert run(["reconstruct", "--data", data, "--checkpoint", str(pt / "checkpoints/last.ckpt"), "--records", "syn00", "syn05", "--out", str(rc)]) == 0
    for rid in ("syn00", "syn05"):
        plan = json.loads((rc / f"{rid}_mask.json").read_text())
        assert len(plan["masked"]) == 5 and len(plan["unmasked"]) == 15
        rows = _rows(rc / f"{rid}_reconstruction.csv")
        assert len(rows) == 2 * 400
        masked_rows = [r for r in rows if r["masked"] == "1"]
        assert len(masked_rows) == 2 * 5 * 20
        assert all(r["reconstruction"] != "" and r["target"] != "" for r in masked_rows)
        assert all(r["reconstruction"] == "" for r in rows if r["masked"] == "0")


def test_finetune_from_scratch(workdir):
    out = workdir / "scratch"
    assert run(["finetune", "--data", str(workdir / "data/manifest.json"), "--config", str(workdir / "toy.json"), "--from-scratch", "--epochs", "1", "--out", str(out)]) == 0
    assert len(_rows(out / "logs.csv")) == 1
    assert (out / "checkpoints" / "best.ckpt").is_file()


def test_inspect(capsys):
    assert run(["inspect", "--variant", "T", "--labels", "28"]) == 0
    out = capsys.readouterr().out
    assert "5.7M" in out
    assert "pretrain_model parameters: 5728776" in out
    assert "finetune_model parameters: 5441116" in out


def test_failure_classes(workdir, tmp_path, capsys):
    data = str(workdir / "data/manifest.json")
    # missing file
    assert run(["pretrain", "--data", str(tmp_path / "none.json"), "--out", str(tmp_path / "x")]) == 3
    assert run(["finetune", "--data", data, "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "x")]) == 3
    assert run(["pretrain", "--data", data, "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "x")]) == 3
    # bad config
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pretrain": {"epochz": 3}}))
    assert run(["pretrain", "--data", data, "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert run(["pretrain", "--data", data, "--t-len", "7", "--out", str(tmp_path / "x")]) == 2
    assert run(["finetune", "--data", data, "--out", str(tmp_path / "x")]) == 2
    # degenerate config
    assert run(["pretrain", "--data", data, "--config", str(workdir / "toy.json"), "--mask-ratio", "0.01", "--out", str(tmp_path / "x")]) == 4
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 7 and all(line.startswith("mtecg: ") for line in err)


def test_pretrain_resume_matches_unbroken(workdir):
    data = str(workdir / "data/manifest.json")
    toy = str(workdir / "toy.json")
    full = workdir / "full"
    assert run(["pretrain", "--data", data, "--config", toy, "--out", str(full)]) == 0
    resumed = workdir / "resumed"
    assert run(["pretrain", "--data", data, "--config", toy, "--resume", str(full / "checkpoints/epoch_0001.ckpt"), "--out", str(resumed)]) == 0
    assert (resumed / "logs.csv").read_bytes() == (full / "logs.csv").read_bytes()


def test_parser_builds():
    assert build_parser().prog == "mtecg"
