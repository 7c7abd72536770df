import json

import numpy as np
import pytest

from mtecg.signal_io import (
    Dataset,
    DatasetError,
    EcgRecord,
    SplitSpec,
    SyntheticConfig,
    draw_beat_params,
    feature_for_label,
    generate_synthetic,
    load_dataset,
    render_signal,
    round_half_away,
    save_dataset,
    split_dataset,
)


def _records(n, k=2, q=8, c=2):
    rng = np.random.default_rng(0)
    return [
        EcgRecord(f"r{i}", rng.normal(size=(k, q)).astype(np.float32), 100, rng.integers(0, 2, c).astype(np.int8))
        for i in range(n)
    ]


def test_three_records_keep_order(tmp_path):
    ds = Dataset(_records(3), ["a", "b"])
    back = load_dataset(save_dataset(ds, tmp_path))
    assert back.ids == ["r0", "r1", "r2"]
    assert len(back) == 3


def test_wrong_byte_length_names_record(tmp_path):
    path = save_dataset(Dataset(_records(3), ["a", "b"]), tmp_path)
    (tmp_path / "signals" / "r1.f32").write_bytes(b"\0" * 12)
    with pytest.raises(DatasetError, match="'r1'.*shape mismatch"):
        load_dataset(path)


def test_missing_signal_file(tmp_path):
    path = save_dataset(Dataset(_records(2), ["a", "b"]), tmp_path)
    (tmp_path / "signals" / "r0.f32").unlink()
    with pytest.raises(DatasetError, match="'r0'.*not found"):
        load_dataset(path)


def test_missing_field_and_label_length(tmp_path):
    path = save_dataset(Dataset(_records(2), ["a", "b"]), tmp_path)
    manifest = json.loads(path.read_text())
    del manifest["records"][1]["labels"]
    path.write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="'r1'.*missing"):
        load_dataset(path)
    recs = _records(2)
    recs[0].labels = np.array([1], dtype=np.int8)
    with pytest.raises(DatasetError, match="'r0'"):
        Dataset(recs, ["a", "b"])


def test_inconsistent_shapes_rejected():
    recs = _records(2)
    recs[1].signal = np.zeros((2, 4), dtype=np.float32)
    with pytest.raises(DatasetError, match="'r1'"):
        Dataset(recs, ["a", "b"])


def test_synthetic_round_trip_bit_exact(tmp_path):
    ds = generate_synthetic(6, 3, 400, 5, seed=3)
    back = load_dataset(save_dataset(ds, tmp_path))
    for a, b in zip(ds.records, back.records):
        assert a.signal.tobytes() == b.signal.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)
    assert back.label_names == ds.label_names


def test_synthetic_deterministic():
    a = generate_synthetic(4, 2, 400, 3, seed=7)
    b = generate_synthetic(4, 2, 400, 3, seed=7)
    for ra, rb in zip(a.records, b.records):
        assert ra.signal.tobytes() == rb.signal.tobytes()
        np.testing.assert_array_equal(ra.labels, rb.labels)
    c = generate_synthetic(4, 2, 400, 3, seed=8)
    assert a.records[0].signal.tobytes() != c.records[0].signal.tobytes()


def test_amplitude_bound():
    ds = generate_synthetic(1, 1, 200, 1, seed=0)
    sig = ds.records[0].signal
    assert np.all(np.isfinite(sig))
    assert np.abs(sig).max() < SyntheticConfig().amplitude_bound
    # Extreme effect strength is clipped to the bound.
    cfg = SyntheticConfig(effect_strength=50.0, label_prob=1.0)
    sig = generate_synthetic(3, 2, 400, 8, seed=1, config=cfg).signals()
    assert np.abs(sig).max() <= cfg.amplitude_bound


def _render_pair(j, c, k=2, q=400, cfg=None):
    cfg = cfg or SyntheticConfig(noise_std=0.0, wander_max_mv=0.0)
    params = draw_beat_params(np.random.default_rng(11), k, q, cfg)
    zero = np.zeros(c, dtype=np.int8)
    on = zero.copy()
    on[j] = 1
    return render_signal(params, zero, q, cfg), render_signal(params, on, q, cfg), params, cfg


@pytest.mark.parametrize("j", range(10))
def test_label_changes_only_its_feature(j):
    # Toggling j changes the signal, only on its lead, and the same way whatever else is on.
    c = 10
    base, toggled, params, cfg = _render_pair(j, c)
    diff = toggled - base
    assert np.abs(diff).max() > 0.01
    wave, attr, value, lead = feature_for_label(j, 2)
    if lead is not None:
        other = 1 - lead
        assert np.abs(diff[other]).max() == 0.0
    # With every other label on as well, toggling j gives the same difference
    # unless another label touches the same wave (labels j and j % 8 do).
    rest = np.ones(c, dtype=np.int8)
    shares = [i for i in range(c) if i != j and feature_for_label(i, 2)[0] == wave]
    if not shares:
        rest_off = rest.copy()
        rest_off[j] = 0
        diff2 = render_signal(params, rest, 400, cfg) - render_signal(params, rest_off, 400, cfg)
        np.testing.assert_allclose(diff2, diff, atol=1e-12)


def test_label_features_are_learnable_by_construction():
    # Every label's peak change stands well clear of the noise level at strength 1.
    for j in range(8):
        base, toggled, _, cfg = _render_pair(j, 8)
        assert np.abs(toggled - base).max() > 5 * SyntheticConfig().noise_std


def test_label_names():
    ds = generate_synthetic(2, 2, 400, 10, seed=0)
    assert ds.label_names[0] == "T_amp_scale"
    assert ds.label_names[8] == "T_amp_scale_lead0"
    assert len(set(ds.label_names)) == 10


def test_generator_rejects_bad_shapes():
    with pytest.raises(ValueError):
        generate_synthetic(0, 2, 400, 3, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic(2, 2, 401, 3, seed=0, t_len=200)


def test_split_sizes_8_1_1():
    ds = Dataset(_records(10), ["a", "b"])
    tr, va, te = split_dataset(ds, SplitSpec(0.8, 0.1, 0.1, seed=0))
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    assert set(tr.ids) | set(va.ids) | set(te.ids) == set(ds.ids)
    assert not (set(tr.ids) & set(va.ids) or set(tr.ids) & set(te.ids) or set(va.ids) & set(te.ids))


def test_split_deterministic_and_seed_dependent():
    ds = Dataset(_records(50), ["a", "b"])
    a = split_dataset(ds, SplitSpec(seed=3))
    b = split_dataset(ds, SplitSpec(seed=3))
    assert [p.ids for p in a] == [p.ids for p in b]
    c = split_dataset(ds, SplitSpec(seed=4))
    assert [p.ids for p in a] != [p.ids for p in c]


def test_split_independent_of_record_order():
    recs = _records(30)
    a = split_dataset(Dataset(recs, ["a", "b"]), SplitSpec(seed=1))
    b = split_dataset(Dataset(recs[::-1], ["a", "b"]), SplitSpec(seed=1))
    assert [set(p.ids) for p in a] == [set(p.ids) for p in b]


def test_split_keeps_patients_together():
    recs = _records(40)
    for i, r in enumerate(recs):
        r.patient_id = f"p{i // 4}"
    parts = split_dataset(Dataset(recs, ["a", "b"]), SplitSpec(seed=0))
    for part in parts:
        patients = {r.patient_id for r in part.records}
        for other in parts:
            if other is not part:
                assert not patients & {r.patient_id for r in other.records}


def test_empty_split_part_raises():
    with pytest.raises(ValueError, match="empty"):
        split_dataset(Dataset(_records(3), ["a", "b"]), SplitSpec())


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(0.8, 0.1, 0.2)
    with pytest.raises(ValueError):
        SplitSpec(1.0, 0.0, 0.0)


def test_round_half_away():
    assert round_half_away(0.5) == 1
    assert round_half_away(2.5) == 3
    assert round_half_away(-2.5) == -3
    assert round_half_away(0.1 * 15) == 2  # 1.5000000000000002
    assert round_half_away(0.35 * 10) == 4  # 3.4999999999999996
