"""ECG records, manifest-backed storage, deterministic splits and a synthetic generator."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STORAGE_DTYPE = np.dtype("<f4")


class DatasetError(ValueError):
    """Raised for malformed manifests or records; the message names the record."""


@dataclass
class EcgRecord:
    id: str
    signal: np.ndarray  # (K, Q) millivolts
    sampling_rate_hz: int
    labels: np.ndarray  # (C,) multi-hot
    patient_id: str | None = None

    @property
    def k_leads(self) -> int:
        return self.signal.shape[0]

    @property
    def q_samples(self) -> int:
        return self.signal.shape[1]

    def validate(self, t_len: int | None = None) -> None:
        if self.signal.ndim != 2 or min(self.signal.shape) < 1:
            raise DatasetError(f"record {self.id!r}: signal must be a non-empty K x Q matrix")
        if not np.all(np.isfinite(self.signal)):
            raise DatasetError(f"record {self.id!r}: signal contains non-finite values")
        if self.sampling_rate_hz <= 0:
            raise DatasetError(f"record {self.id!r}: sampling rate must be positive")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DatasetError(f"record {self.id!r}: labels must be 0/1")
        if t_len is not None and self.q_samples % t_len:
            raise DatasetError(f"record {self.id!r}: Q={self.q_samples} not divisible by T={t_len}")


@dataclass
class Dataset:
    records: list[EcgRecord]
    label_names: list[str]
    provenance: str = ""

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.records)

    def validate(self) -> None:
        seen = set()
        n_labels = len(self.label_names)
        ref = self.records[0] if self.records else None
        for rec in self.records:
            rec.validate()
            if rec.id in seen:
                raise DatasetError(f"record {rec.id!r}: duplicate id")
            seen.add(rec.id)
            if len(rec.labels) != n_labels:
                raise DatasetError(
                    f"record {rec.id!r}: {len(rec.labels)} labels, dataset has {n_labels}"
                )
            if rec.signal.shape != ref.signal.shape or rec.sampling_rate_hz != ref.sampling_rate_hz:
                raise DatasetError(
                    f"record {rec.id!r}: shape {rec.signal.shape}@{rec.sampling_rate_hz}Hz differs "
                    f"from {ref.signal.shape}@{ref.sampling_rate_hz}Hz"
                )

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def n_labels(self) -> int:
        return len(self.label_names)

    def signals(self) -> np.ndarray:
        """Stacked signals, shape (n, K, Q)."""
        return np.stack([r.signal for r in self.records])

    def label_matrix(self) -> np.ndarray:
        return np.stack([r.labels for r in self.records]).astype(np.int64)

    def subset(self, ids, provenance: str | None = None) -> "Dataset":
        wanted = set(ids)
        return Dataset(
            [r for r in self.records if r.id in wanted],
            list(self.label_names),
            self.provenance if provenance is None else provenance,
        )


# --------------------------------------------------------------------------
# manifest storage
# --------------------------------------------------------------------------


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write signals as raw little-endian float32 files plus ``manifest.json``."""
    directory = Path(directory)
    (directory / "signals").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in dataset.records:
        rel = f"signals/{rec.id}.f32"
        np.ascontiguousarray(rec.signal, dtype=STORAGE_DTYPE).tofile(directory / rel)
        entry = {
            "id": rec.id,
            "path": rel,
            "k": rec.k_leads,
            "q": rec.q_samples,
            "sampling_rate_hz": rec.sampling_rate_hz,
            "labels": [int(v) for v in rec.labels],
        }
        if rec.patient_id is not None:
            entry["patient_id"] = rec.patient_id
        entries.append(entry)
    manifest = {
        "label_names": list(dataset.label_names),
        "provenance": dataset.provenance,
        "records": entries,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def _read_signal(base: Path, entry: dict) -> np.ndarray:
    rid = entry.get("id", "?")
    path = base / entry["path"]
    if not path.is_file():
        raise DatasetError(f"record {rid!r}: signal file {path} not found")
    k, q = int(entry["k"]), int(entry["q"])
    raw = path.read_bytes()
    expected = k * q * STORAGE_DTYPE.itemsize
    if len(raw) != expected:
        raise DatasetError(
            f"record {rid!r}: shape mismatch, {path.name} has {len(raw)} bytes, expected {expected} for K={k}, Q={q}"
        )
    return np.frombuffer(raw, dtype=STORAGE_DTYPE).reshape(k, q).copy()


def load_dataset(manifest_path: str | Path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"manifest {manifest_path} not found")
    try:
        manifest = json.loads(manifest_path.read_text())
        label_names = list(manifest["label_names"])
        entries = manifest["records"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"manifest {manifest_path}: malformed ({exc})") from exc

    base = manifest_path.parent
    records = []
    for entry in entries:
        missing = {"id", "path", "k", "q", "sampling_rate_hz", "labels"} - set(entry)
        if missing:
            raise DatasetError(f"record {entry.get('id', '?')!r}: missing fields {sorted(missing)}")
        records.append(
            EcgRecord(
                id=str(entry["id"]),
                signal=_read_signal(base, entry),
                sampling_rate_hz=int(entry["sampling_rate_hz"]),
                labels=np.asarray(entry["labels"], dtype=np.int8),
                patient_id=entry.get("patient_id"),
            )
        )
    return Dataset(records, label_names, manifest.get("provenance", str(manifest_path)))


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


def round_half_away(x: float) -> int:
    """Round to nearest integer, ties away from zero (guarding against binary noise)."""
    x = round(x, 9)
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(not 0 < f < 1 for f in fracs):
            raise ValueError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)!r}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


def _group_key(group: str, seed: int) -> str:
    return hashlib.sha256(f"{seed}:{group}".encode()).hexdigest()


def split_dataset(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Patient-grouped train/val/test split.

    The position of each group in the split order is a hash of (group, seed),
    so assignment does not depend on record order. Validation and test sizes
    are ``round(fraction * n)``; train takes the remainder. Records sharing a
    ``patient_id`` always land in the same part.
    """
    if not dataset.records:
        raise ValueError("cannot split an empty dataset")
    n = len(dataset)
    n_val = round_half_away(spec.val_fraction * n)
    n_test = round_half_away(spec.test_fraction * n)

    groups: dict[str, list[str]] = {}
    for rec in dataset.records:
        groups.setdefault(rec.patient_id if rec.patient_id is not None else f"record:{rec.id}", []).append(rec.id)
    order = sorted(groups, key=lambda g: _group_key(g, spec.seed))

    val_ids, test_ids, train_ids = [], [], []
    for g in order:
        if len(val_ids) < n_val:
            val_ids += groups[g]
        elif len(test_ids) < n_test:
            test_ids += groups[g]
        else:
            train_ids += groups[g]

    parts = {"train": train_ids, "val": val_ids, "test": test_ids}
    empty = [name for name, ids in parts.items() if not ids]
    if empty:
        raise ValueError(f"split of {n} records leaves {', '.join(empty)} empty")
    return tuple(dataset.subset(parts[name], f"{dataset.provenance}[{name}]") for name in ("train", "val", "test"))


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------

# Wave templates: (name, offset from R peak in s, gaussian width in s, amplitude in mV).
WAVES = (
    ("P", -0.20, 0.025, 0.20),
    ("Q", -0.045, 0.015, -0.10),
    ("R", 0.0, 0.015, 1.00),
    ("S", 0.045, 0.015, -0.25),
    ("T", 0.26, 0.040, 0.30),
    ("ST", 0.13, 0.045, 0.0),
    ("U", 0.44, 0.030, 0.0),
    ("delta", -0.07, 0.020, 0.0),
)

# label feature -> (wave name, attribute, value). Each feature touches exactly one
# wave, so toggling a label changes only that wave's contribution.
FEATURES = (
    ("T", "amp_scale", -1.0),  # T-wave inversion
    ("R", "width_scale", 2.0),  # widened QRS peak
    ("ST", "amp_add", 0.20),  # ST elevation
    ("S", "amp_scale", 3.0),  # deep S wave
    ("P", "amp_scale", 0.0),  # absent P wave
    ("Q", "amp_scale", 4.0),  # pathological Q wave
    ("U", "amp_add", 0.15),  # prominent U wave
    ("delta", "amp_add", 0.25),  # pre-excitation slur
)

AMPLITUDE_BOUND = 5.0


@dataclass
class BeatParams:
    """Per-record randomness that is independent of the labels."""

    heart_rate_bpm: float
    first_beat_s: float
    lead_mix: np.ndarray  # (K, n_waves) per-lead gain of each wave
    wander_amp: np.ndarray  # (K,)
    wander_freq_hz: float
    wander_phase: float
    noise: np.ndarray  # (K, Q)


@dataclass
class SyntheticConfig:
    sampling_rate_hz: int = 100
    noise_std: float = 0.02
    effect_strength: float = 1.0
    label_prob: float = 0.5
    heart_rate_range: tuple[float, float] = (55.0, 95.0)
    phase_jitter: float = 1.0  # first R peak uniform in [0, jitter * RR)
    lead_mix_range: tuple[float, float] = (0.8, 1.2)
    wander_max_mv: float = 0.1
    amplitude_bound: float = AMPLITUDE_BOUND


def feature_for_label(j: int, k_leads: int) -> tuple[str, str, float, int | None]:
    """Morphology change toggled by label ``j``: (wave, attribute, value, lead or None).

    Labels 0..7 act on all leads; label ``j >= 8`` repeats feature ``j % 8``
    restricted to lead ``(j // 8 - 1) % k_leads``.
    """
    wave, attr, value = FEATURES[j % len(FEATURES)]
    lead = None if j < len(FEATURES) else (j // len(FEATURES) - 1) % k_leads
    return wave, attr, value, lead


def draw_beat_params(rng: np.random.Generator, k_leads: int, q_samples: int, cfg: SyntheticConfig) -> BeatParams:
    hr = rng.uniform(*cfg.heart_rate_range)
    rr = 60.0 / hr
    return BeatParams(
        heart_rate_bpm=hr,
        first_beat_s=rng.uniform(0.0, rr) * cfg.phase_jitter + 0.1 * (1.0 - cfg.phase_jitter),
        lead_mix=rng.uniform(*cfg.lead_mix_range, size=(k_leads, len(WAVES))),
        wander_amp=rng.uniform(0.0, cfg.wander_max_mv, size=k_leads),
        wander_freq_hz=rng.uniform(0.1, 0.4),
        wander_phase=rng.uniform(0.0, 2 * np.pi),
        noise=rng.normal(0.0, cfg.noise_std, size=(k_leads, q_samples)),
    )


def render_signal(params: BeatParams, labels, q_samples: int, cfg: SyntheticConfig) -> np.ndarray:
    """Deterministically render a (K, Q) float64 signal from beat params and labels."""
    k_leads = params.lead_mix.shape[0]
    fs = cfg.sampling_rate_hz
    t = np.arange(q_samples) / fs
    rr = 60.0 / params.heart_rate_bpm
    # Beats whose waves could reach into the window.
    r_peaks = params.first_beat_s + rr * np.arange(-1, int(q_samples / fs / rr) + 2)

    n_waves = len(WAVES)
    amp = np.array([w[3] for w in WAVES], dtype=np.float64)[None, :].repeat(k_leads, 0)
    width = np.array([w[2] for w in WAVES], dtype=np.float64)[None, :].repeat(k_leads, 0)
    names = [w[0] for w in WAVES]
    for j, on in enumerate(np.asarray(labels)):
        if not on:
            continue
        wave, attr, value, lead = feature_for_label(j, k_leads)
        w = names.index(wave)
        rows = slice(None) if lead is None else slice(lead, lead + 1)
        s = cfg.effect_strength
        if attr == "amp_scale":
            amp[rows, w] *= 1.0 + s * (value - 1.0)
        elif attr == "width_scale":
            width[rows, w] *= 1.0 + s * (value - 1.0)
        else:
            amp[rows, w] += s * value

    signal = np.zeros((k_leads, q_samples))
    for w in range(n_waves):
        centers = r_peaks + WAVES[w][1]
        for k in range(k_leads):
            if amp[k, w] == 0.0:
                continue
            bumps = np.exp(-0.5 * ((t[None, :] - centers[:, None]) / width[k, w]) ** 2).sum(0)
            signal[k] += params.lead_mix[k, w] * amp[k, w] * bumps
    wander = params.wander_amp[:, None] * np.sin(2 * np.pi * params.wander_freq_hz * t + params.wander_phase)
    signal += wander + params.noise
    return np.clip(signal, -cfg.amplitude_bound, cfg.amplitude_bound)


def generate_synthetic(
    n_records: int,
    k_leads: int,
    q_samples: int,
    n_labels: int,
    seed: int,
    config: SyntheticConfig | None = None,
    t_len: int | None = None,
) -> Dataset:
    """Deterministic synthetic ECG dataset where each label toggles one wave feature.

    Label-independent randomness (rate, lead gains, wander, noise) and the
    labels come from separate streams, so a record's morphology differs
    between label vectors only through the toggled features.
    """
    for name, v in (("n_records", n_records), ("k_leads", k_leads), ("q_samples", q_samples), ("n_labels", n_labels)):
        if v < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    if t_len is not None and q_samples % t_len:
        raise ValueError(f"q_samples={q_samples} not divisible by T={t_len}")
    cfg = config or SyntheticConfig()
    base_rng, label_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))

    records = []
    width = len(str(n_records - 1))
    for i in range(n_records):
        params = draw_beat_params(base_rng, k_leads, q_samples, cfg)
        labels = (label_rng.random(n_labels) < cfg.label_prob).astype(np.int8)
        signal = render_signal(params, labels, q_samples, cfg).astype(STORAGE_DTYPE)
        records.append(
            EcgRecord(
                id=f"syn{i:0{width}d}",
                signal=signal,
                sampling_rate_hz=cfg.sampling_rate_hz,
                labels=labels,
            )
        )
    label_names = []
    for j in range(n_labels):
        wave, attr, value, lead = feature_for_label(j, k_leads)
        label_names.append(f"{wave}_{attr}" + ("" if lead is None else f"_lead{lead}"))
    return Dataset(records, label_names, f"synthetic(seed={seed}, n={n_records}, K={k_leads}, Q={q_samples})")
