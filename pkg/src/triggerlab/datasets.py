"""Sensor-window datasets: importers, a synthetic surrogate, splits, and disk IO.

A dataset is an ordered batch of fixed-length multichannel windows with
integer class labels. Real recordings come from the UCI smartphone layout
or from per-trial CSVs; the synthetic generator produces separable
activity-like and gait-like signals so every experiment runs without
proprietary files. All parsers reject malformed input instead of coercing.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


PROVENANCES = ("uci", "motionsense_csv", "gait_pairs", "synthetic")

# canonical channel order of the UCI smartphone recordings
UCI_SIGNALS = (
    "body_acc_x", "body_acc_y", "body_acc_z",
    "body_gyro_x", "body_gyro_y", "body_gyro_z",
    "total_acc_x", "total_acc_y", "total_acc_z",
)
UCI_WINDOW = 128
UCI_CLASSES = 6


@dataclass
class ChannelStats:
    mean: np.ndarray  # (d,)
    std: np.ndarray   # (d,)


@dataclass
class LabeledDataset:
    """Windows (n, t, d) float32, or (n, 2, t, d) for enrolled/probe pairs."""

    windows: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: str
    paired: bool = False
    channel_stats: ChannelStats | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.windows = np.ascontiguousarray(self.windows, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        want_ndim = 4 if self.paired else 3
        if self.windows.ndim != want_ndim:
            raise DataError(f"windows must be {want_ndim}-d, got shape {self.windows.shape}")
        if len(self.windows) != len(self.labels):
            raise DataError(f"{len(self.windows)} windows but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"label outside [0, {self.n_classes})")
        if self.provenance not in PROVENANCES:
            raise DataError(f"unknown provenance '{self.provenance}'")
        if not np.all(np.isfinite(self.windows)):
            raise DataError("windows contain non-finite values")

    def __len__(self):
        return len(self.windows)

    @property
    def window_shape(self):  # (t, d)
        return self.windows.shape[-2], self.windows.shape[-1]

    def subset(self, idx) -> "LabeledDataset":
        return replace(self, windows=self.windows[idx], labels=self.labels[idx],
                       meta=dict(self.meta))


@dataclass(frozen=True)
class SplitPlan:
    """Three-way split: classifier-train / generator-train / test.

    With disjoint=True all fractions apply to the whole dataset and the
    three index sets are pairwise disjoint. With disjoint=False the
    generator set is a stratified subset of classifier-train covering
    generator_frac of it (the attacker sharing the victim's data).
    """

    classifier_frac: float = 0.7
    generator_frac: float = 0.7
    test_frac: float = 0.2
    disjoint: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("classifier_frac", "generator_frac", "test_frac"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise DataError(f"{name} must be in (0, 1], got {v}")
        if self.disjoint and self.classifier_frac + self.generator_frac + self.test_frac > 1 + 1e-9:
            raise DataError("disjoint split fractions must sum to at most 1")
        if not self.disjoint and self.classifier_frac + self.test_frac > 1 + 1e-9:
            raise DataError("classifier_frac + test_frac must be at most 1")


# ---------------------------------------------------------------------------
# synthetic surrogate


def har_window(label: int, phase: float, t_len: int, d: int,
               amp: float = 1.0, drift_phase: float = 0.0,
               freq_jitter: float = 0.0) -> np.ndarray:
    """Closed-form noiseless activity window for one per-window draw.

    The class determines the carrier frequency band and harmonic weight;
    the per-window draw contributes phase, an amplitude jitter, a small
    frequency jitter, and the phase of a class-independent low-frequency
    drift component.
    """
    tgrid = np.arange(t_len) / t_len
    chan = np.arange(d)
    gains = 0.8 + 0.4 * chan / max(d - 1, 1)
    f = 1.3 + 0.8 * label + freq_jitter
    base = np.sin(2 * np.pi * f * tgrid[:, None] + phase + 2 * np.pi * chan[None, :] / d)
    harm = (0.3 + 0.05 * label) * np.sin(2 * np.pi * 2 * f * tgrid[:, None] + 1.7 * phase)
    drift = 0.3 * np.sin(2 * np.pi * 0.5 * tgrid[:, None] + drift_phase + np.pi * chan[None, :] / d)
    return (amp * gains[None, :] * (base + harm) + drift).astype(np.float32)


def synth_generate(profile: str, n_per_class: int, t_len: int, d: int, seed: int,
                   n_classes: int = 6, n_subjects: int = 10, noise: float = 0.3) -> LabeledDataset:
    """Deterministic synthetic sensor windows.

    'har': each class is a distinct mixture of sinusoids (class-specific
    frequency, amplitude, and harmonic weight) with a random phase per
    window plus Gaussian noise; classes are separable by construction.
    With noise 0 a window is fully determined by (label, phase); the
    phases are recorded in meta["phases"].
    'gait': each subject carries a persistent frequency/phase signature;
    output is enrolled/probe pairs labeled same(1) / different(0), 1:1.
    """
    if n_per_class <= 0:
        raise DataError("n_per_class must be positive")
    if profile == "har":
        rng = np.random.default_rng([seed, 11])
        n = n_per_class * n_classes
        windows = np.empty((n, t_len, d), dtype=np.float32)
        labels = np.repeat(np.arange(n_classes), n_per_class).astype(np.int32)
        draws = np.empty((n, 4))  # phase, amplitude jitter, drift phase, freq jitter
        for i, k in enumerate(labels):
            draws[i] = (rng.uniform(0, 2 * np.pi), rng.uniform(0.8, 1.2),
                        rng.uniform(0, 2 * np.pi), rng.uniform(-0.15, 0.15))
            sig = har_window(int(k), draws[i, 0], t_len, d, amp=draws[i, 1],
                             drift_phase=draws[i, 2], freq_jitter=draws[i, 3])
            if noise > 0:
                sig = sig + rng.normal(0, noise, size=(t_len, d)).astype(np.float32)
            windows[i] = sig
        order = rng.permutation(n)
        return LabeledDataset(windows[order], labels[order], n_classes, "synthetic",
                              meta={"profile": "har", "noise": noise, "draws": draws[order]})

    if profile == "gait":
        rng = np.random.default_rng([seed, 12])
        tgrid = np.arange(t_len) / t_len
        chan = np.arange(d)
        freqs = 1.2 + 0.45 * np.arange(n_subjects) + rng.uniform(-0.1, 0.1, n_subjects)
        phases = rng.uniform(0, 2 * np.pi, n_subjects)

        def window_of(subject):
            jitter = rng.uniform(-0.3, 0.3)
            sig = np.sin(2 * np.pi * freqs[subject] * tgrid[:, None]
                         + phases[subject] + jitter + np.pi * chan[None, :] / d)
            sig = sig + 0.3 * np.sin(2 * np.pi * 2 * freqs[subject] * tgrid[:, None] + jitter)
            if noise > 0:
                sig = sig + rng.normal(0, noise, size=(t_len, d))
            return sig.astype(np.float32)

        pairs, labels = [], []
        for _ in range(n_per_class):  # same-subject pairs, label 1
            s = int(rng.integers(n_subjects))
            pairs.append(np.stack([window_of(s), window_of(s)]))
            labels.append(1)
        for _ in range(n_per_class):  # different-subject pairs, label 0
            a, b = rng.choice(n_subjects, size=2, replace=False)
            pairs.append(np.stack([window_of(int(a)), window_of(int(b))]))
            labels.append(0)
        order = rng.permutation(len(pairs))
        windows = np.stack(pairs)[order]
        labels = np.asarray(labels, dtype=np.int32)[order]
        return LabeledDataset(windows, labels, 2, "gait_pairs", paired=True,
                              meta={"profile": "gait", "noise": noise, "n_subjects": n_subjects})

    raise DataError(f"unknown synthetic profile '{profile}'")


# ---------------------------------------------------------------------------
# importers


def _read_signal_file(path: Path, t_len: int) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != t_len:
                raise DataError(f"{path}:{lineno}: expected {t_len} values per line, got {len(parts)}")
            try:
                rows.append(np.array(parts, dtype=np.float32))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value")
    return np.stack(rows) if rows else np.empty((0, t_len), dtype=np.float32)


def _read_uci_split(root: Path, split: str):
    sig_dir = root / split / "Inertial Signals"
    mats = [_read_signal_file(sig_dir / f"{sig}_{split}.txt", UCI_WINDOW) for sig in UCI_SIGNALS]
    counts = {m.shape[0] for m in mats}
    if len(counts) != 1:
        raise DataError(f"{sig_dir}: signal files disagree on window count {sorted(counts)}")
    windows = np.stack(mats, axis=2)  # (n, 128, 9)
    label_path = root / split / f"y_{split}.txt"
    if not label_path.is_file():
        raise DataError(f"missing file: {label_path}")
    labels = []
    with open(label_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            try:
                v = int(s)
            except ValueError:
                raise DataError(f"{label_path}:{lineno}: non-integer label")
            if not 1 <= v <= UCI_CLASSES:
                raise DataError(f"{label_path}:{lineno}: label {v} outside 1..{UCI_CLASSES}")
            labels.append(v - 1)
    labels = np.asarray(labels, dtype=np.int32)
    if len(labels) != len(windows):
        raise DataError(f"{label_path}: {len(labels)} labels for {len(windows)} windows")
    return windows, labels


def import_uci_har(root) -> LabeledDataset:
    """Read the standard UCI smartphone layout: per-signal text files of
    128 whitespace-separated floats per line and 1-based label files.

    Train and test windows are concatenated in that order; the official
    counts live in meta[\"official_train_count\"] / [\"official_test_count\"].
    """
    root = Path(root)
    tr_w, tr_y = _read_uci_split(root, "train")
    te_w, te_y = _read_uci_split(root, "test")
    windows = np.concatenate([tr_w, te_w])
    labels = np.concatenate([tr_y, te_y])
    return LabeledDataset(windows, labels, UCI_CLASSES, "uci",
                          meta={"channels": list(UCI_SIGNALS),
                                "official_train_count": len(tr_w),
                                "official_test_count": len(te_w)})


def import_trial_csv(manifest_path) -> LabeledDataset:
    """Read per-trial CSVs listed in a JSON manifest and window them.

    Manifest keys: window_length, n_classes, channel_columns (ordered),
    trials: [{path, label}]. Trials slice into non-overlapping windows;
    a trailing remainder shorter than one window is discarded.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"missing manifest: {manifest_path}")
    try:
        man = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: invalid JSON manifest ({e})")
    for key in ("window_length", "n_classes", "channel_columns", "trials"):
        if key not in man:
            raise DataError(f"{manifest_path}: manifest missing '{key}'")
    t_len = int(man["window_length"])
    k = int(man["n_classes"])
    columns = list(man["channel_columns"])
    all_windows, all_labels = [], []
    for trial in man["trials"]:
        path = manifest_path.parent / trial["path"]
        label = int(trial["label"])
        if not 0 <= label < k:
            raise DataError(f"{path}: label {label} outside [0, {k})")
        if not path.is_file():
            raise DataError(f"missing trial file: {path}")
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            for col in columns:
                if col not in header:
                    raise DataError(f"{path}: missing column '{col}'")
            rows = []
            for rowno, row in enumerate(reader, start=2):
                try:
                    rows.append([float(row[col]) for col in columns])
                except (TypeError, ValueError):
                    raise DataError(f"{path}:{rowno}: non-numeric cell")
        if len(rows) < t_len:
            raise DataError(f"{path}: trial shorter than one window ({len(rows)} < {t_len})")
        arr = np.asarray(rows, dtype=np.float32)
        n_win = len(rows) // t_len
        for i in range(n_win):
            all_windows.append(arr[i * t_len:(i + 1) * t_len])
            all_labels.append(label)
    return LabeledDataset(np.stack(all_windows), np.asarray(all_labels, dtype=np.int32), k,
                          "motionsense_csv", meta={"channels": columns})


# ---------------------------------------------------------------------------
# normalization


def compute_channel_stats(windows: np.ndarray) -> ChannelStats:
    flat = windows.reshape(-1, windows.shape[-1]).astype(np.float64)
    return ChannelStats(mean=flat.mean(axis=0), std=flat.std(axis=0))


def normalize(data: LabeledDataset) -> LabeledDataset:
    """Per-channel z-score using the dataset's (training-derived) stats."""
    if data.channel_stats is None:
        raise DataError("normalize: channel_stats missing; split the dataset first")
    std = data.channel_stats.std
    zero = np.nonzero(std == 0)[0]
    if zero.size:
        raise DataError(f"normalize: zero standard deviation on channel {int(zero[0])}")
    w = (data.windows.astype(np.float64) - data.channel_stats.mean) / std
    out = replace(data, windows=w.astype(np.float32), meta=dict(data.meta))
    out.meta["normalized"] = True
    return out


def denormalize(data: LabeledDataset) -> LabeledDataset:
    """Invert normalize(); round-trips within 1e-6 at sensor scale."""
    if data.channel_stats is None:
        raise DataError("denormalize: channel_stats missing")
    w = data.windows.astype(np.float64) * data.channel_stats.std + data.channel_stats.mean
    out = replace(data, windows=w.astype(np.float32), meta=dict(data.meta))
    out.meta.pop("normalized", None)
    return out


# ---------------------------------------------------------------------------
# splitting


def _stratified_take(labels: np.ndarray, fracs, rng) -> list[np.ndarray]:
    """Stratified apportionment into len(fracs) disjoint index sets.

    Each set gets round(frac * n_total) samples overall while per-class
    counts stay within one sample of frac * class_size (largest-remainder
    rounding, capped by what earlier sets left available).
    """
    classes = np.unique(labels)
    shuffled = {}
    cursor = {}
    for cls in classes:
        idx = np.nonzero(labels == cls)[0]
        shuffled[cls] = idx[rng.permutation(len(idx))]
        cursor[cls] = 0
    sizes = np.array([len(shuffled[c]) for c in classes])
    buckets = []
    for f in fracs:
        target = int(round(f * len(labels)))
        avail = np.array([len(shuffled[c]) - cursor[c] for c in classes])
        quotas = f * sizes
        base = np.minimum(np.floor(quotas).astype(int), avail)
        rem = target - base.sum()
        # ties on fractional part go to the class with most capacity left,
        # else later splits inherit skewed remainders
        order = np.lexsort((-(avail - base), -(quotas - np.floor(quotas))))
        j = 0
        while rem > 0 and j < 4 * len(classes):
            c = order[j % len(classes)]
            if base[c] < avail[c]:
                base[c] += 1
                rem -= 1
            j += 1
        taken = []
        for c, n in zip(classes, base):
            taken.append(shuffled[c][cursor[c]:cursor[c] + n])
            cursor[c] += n
        buckets.append(np.sort(np.concatenate(taken)) if taken else np.array([], dtype=int))
    return buckets


def split(data: LabeledDataset, plan: SplitPlan):
    """Deterministic seeded stratified split into (classifier_train,
    generator_train, test). Channel stats are computed from the classifier
    training portion only and attached to all three outputs."""
    rng = np.random.default_rng([plan.seed, 21])
    if plan.disjoint:
        fracs = (plan.classifier_frac, plan.generator_frac, plan.test_frac)
        ctrain_idx, gtrain_idx, test_idx = _stratified_take(data.labels, fracs, rng)
    else:
        ctrain_idx, test_idx = _stratified_take(
            data.labels, (plan.classifier_frac, plan.test_frac), rng)
        sub_rng = np.random.default_rng([plan.seed, 22])
        inner = _stratified_take(data.labels[ctrain_idx], (plan.generator_frac,), sub_rng)[0]
        gtrain_idx = ctrain_idx[inner]
    for name, idx in (("classifier_train", ctrain_idx), ("generator_train", gtrain_idx),
                      ("test", test_idx)):
        if len(idx) == 0:
            raise DataError(f"split: fraction yields an empty {name} set")
    stats = compute_channel_stats(data.windows[ctrain_idx])
    out = []
    for idx in (ctrain_idx, gtrain_idx, test_idx):
        part = data.subset(idx)
        part.channel_stats = stats
        part.meta["source_indices"] = idx
        out.append(part)
    return tuple(out)


# ---------------------------------------------------------------------------
# canonical on-disk format: one JSON manifest line, float32 window blob,
# int32 label blob, all little-endian


STW_VERSION = 1


def export_stw(data: LabeledDataset, path):
    path = Path(path)
    man = {
        "format": "stw",
        "version": STW_VERSION,
        "t": int(data.windows.shape[-2]),
        "d": int(data.windows.shape[-1]),
        "k": int(data.n_classes),
        "count": int(len(data)),
        "paired": bool(data.paired),
        "provenance": data.provenance,
        "channels": list(data.meta.get("channels", [])),
        "stats": None if data.channel_stats is None else {
            "mean": [float(v) for v in data.channel_stats.mean],
            "std": [float(v) for v in data.channel_stats.std],
        },
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(man, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(data.windows, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(data.labels, dtype="<i4").tobytes())


def import_stw(path) -> LabeledDataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing manifest line")
    try:
        man = json.loads(raw[:nl])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: corrupt manifest ({e})")
    if man.get("format") != "stw" or man.get("version") != STW_VERSION:
        raise DataError(f"{path}: not a version-{STW_VERSION} stw file")
    count, t_len, d = man["count"], man["t"], man["d"]
    pair_factor = 2 if man["paired"] else 1
    wbytes = count * pair_factor * t_len * d * 4
    lbytes = count * 4
    blob = raw[nl + 1:]
    if len(blob) != wbytes + lbytes:
        raise DataError(f"{path}: truncated blob ({len(blob)} bytes, expected {wbytes + lbytes})")
    shape = (count, 2, t_len, d) if man["paired"] else (count, t_len, d)
    windows = np.frombuffer(blob[:wbytes], dtype="<f4").reshape(shape).copy()
    labels = np.frombuffer(blob[wbytes:], dtype="<i4").copy()
    stats = None
    if man["stats"] is not None:
        stats = ChannelStats(mean=np.asarray(man["stats"]["mean"], dtype=np.float64),
                             std=np.asarray(man["stats"]["std"], dtype=np.float64))
    meta = {"channels": man["channels"]} if man["channels"] else {}
    return LabeledDataset(windows, labels, man["k"], man["provenance"], paired=man["paired"],
                          channel_stats=stats, meta=meta)
