import json

import numpy as np
import pytest

from triggerlab.datasets import (
    DataError,
    LabeledDataset,
    SplitPlan,
    denormalize,
    export_stw,
    import_stw,
    import_trial_csv,
    import_uci_har,
    normalize,
    split,
    synth_generate,
)


# ---------------------------------------------------------------------------
# synthetic surrogate


def test_synth_counts_and_shape():
    ds = synth_generate("har", n_per_class=50, t_len=128, d=9, seed=3, n_classes=6)
    assert len(ds) == 300
    assert ds.windows.shape == (300, 128, 9)
    assert ds.n_classes == 6
    assert np.bincount(ds.labels, minlength=6).tolist() == [50] * 6


def test_synth_deterministic():
    a = synth_generate("har", 10, 32, 4, seed=9)
    b = synth_generate("har", 10, 32, 4, seed=9)
    assert np.array_equal(a.windows, b.windows)
    assert np.array_equal(a.labels, b.labels)


def test_synth_noiseless_windows_determined_by_draws():
    from triggerlab.datasets import har_window

    ds = synth_generate("har", 6, 64, 3, seed=1, noise=0.0)
    for i in range(len(ds)):
        phase, amp, drift, fjit = ds.meta["draws"][i]
        expected = har_window(int(ds.labels[i]), phase, 64, 3, amp=amp,
                              drift_phase=drift, freq_jitter=fjit)
        assert np.array_equal(ds.windows[i], expected)


def test_synth_gait_pairs():
    ds = synth_generate("gait", n_per_class=8, t_len=32, d=6, seed=5, n_subjects=4)
    assert ds.paired
    assert ds.windows.shape == (16, 2, 32, 6)
    assert set(np.unique(ds.labels)) == {0, 1}
    assert (ds.labels == 1).sum() == 8


def test_synth_rejects_bad_count():
    with pytest.raises(DataError):
        synth_generate("har", 0, 16, 3, seed=0)


# ---------------------------------------------------------------------------
# UCI layout importer


def make_uci_fixture(root, train_rows=3, test_rows=2):
    rng = np.random.default_rng(0)
    expected = {}
    for splitname, rows in (("train", train_rows), ("test", test_rows)):
        sig_dir = root / splitname / "Inertial Signals"
        sig_dir.mkdir(parents=True)
        mats = []
        for sig in ("body_acc_x", "body_acc_y", "body_acc_z",
                    "body_gyro_x", "body_gyro_y", "body_gyro_z",
                    "total_acc_x", "total_acc_y", "total_acc_z"):
            m = rng.normal(0, 1, size=(rows, 128)).astype(np.float32)
            mats.append(m)
            with open(sig_dir / f"{sig}_{splitname}.txt", "w") as fh:
                for r in m:
                    fh.write(" ".join(f"{v:.7e}" for v in r) + "\n")
        expected[splitname] = np.stack(mats, axis=2)
        labels = (np.arange(rows) % 6) + 1
        with open(root / splitname / f"y_{splitname}.txt", "w") as fh:
            fh.writelines(f"{v}\n" for v in labels)
    return expected


def test_uci_fixture_roundtrip(tmp_path):
    expected = make_uci_fixture(tmp_path)
    ds = import_uci_har(tmp_path)
    assert ds.windows.shape == (5, 128, 9)
    assert ds.meta["official_train_count"] == 3
    # parse identity: text was written with enough digits to round-trip float32
    assert np.allclose(ds.windows[:3], expected["train"], atol=0)
    assert ds.labels.min() >= 0 and ds.labels.max() <= 5


def test_uci_truncated_line_error(tmp_path):
    make_uci_fixture(tmp_path)
    bad = tmp_path / "train" / "Inertial Signals" / "body_acc_x_train.txt"
    lines = bad.read_text().splitlines()
    lines[1] = " ".join(lines[1].split()[:127])
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=r"body_acc_x_train\.txt:2"):
        import_uci_har(tmp_path)


def test_uci_missing_file_error(tmp_path):
    make_uci_fixture(tmp_path)
    (tmp_path / "test" / "Inertial Signals" / "body_gyro_z_test.txt").unlink()
    with pytest.raises(DataError, match="missing file"):
        import_uci_har(tmp_path)


def test_uci_label_out_of_range(tmp_path):
    make_uci_fixture(tmp_path)
    label_file = tmp_path / "train" / "y_train.txt"
    label_file.write_text("1\n7\n2\n")
    with pytest.raises(DataError, match="outside 1..6"):
        import_uci_har(tmp_path)


# ---------------------------------------------------------------------------
# trial CSV importer


def make_csv_fixture(root, rows=120, value=None, window=50):
    cols = [f"c{i}" for i in range(12)]
    man = {"window_length": window, "n_classes": 6, "channel_columns": cols,
           "trials": [{"path": "trial0.csv", "label": 2}]}
    rng = np.random.default_rng(1)
    with open(root / "trial0.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for _ in range(rows):
            vals = [value] * 12 if value is not None else rng.normal(size=12).round(4)
            fh.write(",".join(str(v) for v in vals) + "\n")
    mp = root / "manifest.json"
    mp.write_text(json.dumps(man))
    return mp


def test_csv_windowing_floor_division(tmp_path):
    mp = make_csv_fixture(tmp_path, rows=120, window=50)
    ds = import_trial_csv(mp)
    assert ds.windows.shape == (2, 50, 12)  # 20 trailing rows discarded
    assert ds.labels.tolist() == [2, 2]


def test_csv_constant_value_identity(tmp_path):
    mp = make_csv_fixture(tmp_path, rows=100, value=1.0)
    ds = import_trial_csv(mp)
    assert np.array_equal(ds.windows, np.ones((2, 50, 12), dtype=np.float32))


def test_csv_short_trial_error(tmp_path):
    mp = make_csv_fixture(tmp_path, rows=10, window=50)
    with pytest.raises(DataError, match="shorter than one window"):
        import_trial_csv(mp)


def test_csv_missing_column(tmp_path):
    mp = make_csv_fixture(tmp_path)
    man = json.loads(mp.read_text())
    man["channel_columns"][3] = "nope"
    mp.write_text(json.dumps(man))
    with pytest.raises(DataError, match="missing column 'nope'"):
        import_trial_csv(mp)


def test_csv_non_numeric_cell(tmp_path):
    mp = make_csv_fixture(tmp_path, rows=60)
    lines = (tmp_path / "trial0.csv").read_text().splitlines()
    parts = lines[5].split(",")
    parts[4] = "oops"
    lines[5] = ",".join(parts)
    (tmp_path / "trial0.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="non-numeric cell"):
        import_trial_csv(mp)


# ---------------------------------------------------------------------------
# normalization


def splitted_synth(seed=0, n_per_class=20):
    ds = synth_generate("har", n_per_class, 32, 4, seed=seed)
    return split(ds, SplitPlan(0.6, 0.5, 0.3, disjoint=False, seed=seed))


def test_normalize_roundtrip_within_tolerance():
    ctrain, _, _ = splitted_synth()
    back = denormalize(normalize(ctrain))
    assert np.allclose(back.windows, ctrain.windows, atol=1e-6)


def test_normalize_requires_stats():
    ds = synth_generate("har", 5, 16, 3, seed=2)
    with pytest.raises(DataError, match="channel_stats"):
        normalize(ds)


def test_normalize_zero_std_error_names_channel():
    w = np.random.default_rng(0).normal(size=(10, 8, 3)).astype(np.float32)
    w[:, :, 1] = 0.0
    ds = LabeledDataset(w, np.zeros(10), 2, "synthetic")
    ds.channel_stats = __import__("triggerlab.datasets", fromlist=["compute_channel_stats"]).compute_channel_stats(w)
    with pytest.raises(DataError, match="channel 1"):
        normalize(ds)


def test_training_stats_applied_to_test_split():
    ctrain, _, test = splitted_synth()
    tn = normalize(test)
    # stats came from the training portion, so test channel means need not be 0
    assert tn.channel_stats is ctrain.channel_stats or np.allclose(
        tn.channel_stats.mean, ctrain.channel_stats.mean)
    train_mean = normalize(ctrain).windows.mean(axis=(0, 1))
    assert np.allclose(train_mean, 0.0, atol=1e-3)


# ---------------------------------------------------------------------------
# splits


def test_disjoint_split_sizes_and_disjointness():
    ds = synth_generate("har", 50, 16, 3, seed=1, n_classes=2)  # 100 windows
    ct, gt, te = split(ds, SplitPlan(0.7, 0.1, 0.2, disjoint=True, seed=4))
    assert (len(ct), len(gt), len(te)) == (70, 10, 20)
    a, b, c = (set(map(tuple, [p.meta["source_indices"]])) for p in (ct, gt, te))
    ia, ib, ic = (set(p.meta["source_indices"].tolist()) for p in (ct, gt, te))
    assert not (ia & ib) and not (ia & ic) and not (ib & ic)


def test_overlap_split_generator_subset():
    ds = synth_generate("har", 30, 16, 3, seed=1, n_classes=4)
    ct, gt, te = split(ds, SplitPlan(0.7, 0.7, 0.2, disjoint=False, seed=4))
    ct_idx = set(ct.meta["source_indices"].tolist())
    gt_idx = set(gt.meta["source_indices"].tolist())
    assert gt_idx <= ct_idx
    assert len(gt) == round(0.7 * len(ct))


def test_split_deterministic():
    ds = synth_generate("har", 20, 16, 3, seed=1)
    p = SplitPlan(0.6, 0.2, 0.2, disjoint=True, seed=11)
    first = split(ds, p)
    second = split(ds, p)
    for x, y in zip(first, second):
        assert np.array_equal(x.meta["source_indices"], y.meta["source_indices"])


def test_split_stratification_within_one_sample():
    ds = synth_generate("har", 33, 16, 3, seed=6, n_classes=5)
    ct, gt, te = split(ds, SplitPlan(0.6, 0.2, 0.2, disjoint=True, seed=2))
    for part, frac in ((ct, 0.6), (gt, 0.2), (te, 0.2)):
        counts = np.bincount(part.labels, minlength=5)
        assert np.all(np.abs(counts - frac * 33) <= 1)


def test_split_empty_fraction_error():
    ds = synth_generate("har", 2, 16, 3, seed=0, n_classes=2)
    with pytest.raises(DataError, match="empty"):
        split(ds, SplitPlan(0.9, 0.05, 0.05, disjoint=True, seed=0))


def test_bad_plan_fractions():
    with pytest.raises(DataError):
        SplitPlan(0.8, 0.3, 0.2, disjoint=True)
    with pytest.raises(DataError):
        SplitPlan(0.0, 0.5, 0.5)


# ---------------------------------------------------------------------------
# stw on-disk format


def test_stw_roundtrip_identity(tmp_path):
    ctrain, _, _ = splitted_synth(seed=8)
    p = tmp_path / "part.stw"
    export_stw(ctrain, p)
    back = import_stw(p)
    assert np.array_equal(back.windows, ctrain.windows)
    assert np.array_equal(back.labels, ctrain.labels)
    assert back.n_classes == ctrain.n_classes
    assert back.provenance == ctrain.provenance
    assert np.allclose(back.channel_stats.mean, ctrain.channel_stats.mean)
    # export of the re-import is byte-identical
    p2 = tmp_path / "again.stw"
    export_stw(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_stw_truncated_blob(tmp_path):
    ds = synth_generate("har", 4, 8, 2, seed=0)
    p = tmp_path / "x.stw"
    export_stw(ds, p)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(DataError, match="truncated blob"):
        import_stw(p)


def test_stw_corrupt_manifest(tmp_path):
    p = tmp_path / "x.stw"
    p.write_bytes(b"{not json}\n\x00\x00")
    with pytest.raises(DataError, match="corrupt manifest"):
        import_stw(p)


def test_stw_paired_roundtrip(tmp_path):
    ds = synth_generate("gait", 5, 16, 4, seed=1, n_subjects=3)
    p = tmp_path / "g.stw"
    export_stw(ds, p)
    back = import_stw(p)
    assert back.paired and np.array_equal(back.windows, ds.windows)
