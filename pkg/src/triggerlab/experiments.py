"""Declarative experiment configs and the orchestration pipelines.

A config is one JSON document with nested sections (dataset / model /
split / train / attack / baselines / defenses / output); unknown keys are
rejected. Its canonical hash identifies the run and is stamped into every
emitted report row. Each pipeline appends stage records and metric rows
to an append-only JSONL run ledger; replaying a config with the same seed
reproduces all metric rows exactly.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import plots
from .attacks import (
    AttackConfig,
    apply_trigger,
    baseline_fixed,
    baseline_random,
    baseline_zero_mask,
    target_map,
    train_generator,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .datasets import (
    DataError,
    LabeledDataset,
    SplitPlan,
    export_stw,
    import_stw,
    import_trial_csv,
    import_uci_har,
    normalize,
    split,
    synth_generate,
)
from .defenses import (
    ClusterParams,
    adversarial_train,
    clustering_defense,
    prune,
    rearm,
)
from .metrics import AttackReport, asr, confusion, eligible_mask, mae, mape
from .models import ModelSpec, accuracy, build_model, classify, predict, train_classifier


class ConfigError(ValueError):
    """Malformed experiment configuration."""


DEFAULT_CONFIG = {
    "seed": 7,
    "dataset": {
        "source": "synthetic",          # synthetic | uci | csv | stw
        "profile": "har",               # synthetic: har | gait
        "n_per_class": 100,
        "t_len": 64,
        "d": 6,
        "n_classes": 6,
        "n_subjects": 10,
        "noise": 0.3,
        "uci_root": None,
        "csv_manifest": None,
        "stw_path": None,
        "normalize": False,
    },
    "model": {
        "conv_channels": [32, 64, 64],
        "kernel_t": 5,
        "dropout": 0.2,
        "lstm_hidden": 64,
        "extractor_channels": [32, 32],
        "encoder_widths": [256, 64, 32],
    },
    "split": {
        "classifier_frac": 0.7,
        "generator_frac": 0.7,
        "test_frac": 0.2,
        "disjoint": False,
    },
    "train": {"epochs": 30, "batch_size": 32, "lr": 1e-3},
    "attack": {
        "mode": "all_to_one",
        "target": 0,
        "lam": 0.1,
        "epochs": 50,
        "batch_size": 32,
        "lr": 3e-3,
        "query_mode": "gradient_oracle",
        "warmstart_epochs": 0,
        "lam_sweep": [0.01, 0.1, 1.0],
    },
    "baselines": {
        "random_k": 1.0,
        "fixed_k": [1.0, 5.0],
        "zero_mask": [50, 5, 3],
    },
    "defenses": {
        "prune_fraction": 0.5,
        "cluster": {
            "perplexity": 20.0,
            "iterations": 500,
            "learning_rate": 200.0,
            "detection_threshold": 0.9,
        },
        "advtrain": {"epochs": 50, "mix_ratio": 0.5},
    },
    "output": {"dir": "runs", "plots": True},
}

# full-scale settings from the original training setup
PAPER_SCALE_OVERRIDES = {
    "dataset": {"t_len": 128, "d": 9, "n_per_class": 400},
    "train": {"epochs": 200},
    "attack": {"epochs": 200},
}


def _merge_checked(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge_checked(base[key], val, where)
        elif isinstance(base[key], dict) != isinstance(val, dict):
            raise ConfigError(f"config key '{where}' has the wrong structure")
        else:
            out[key] = copy.deepcopy(val)
    return out


def make_config(overrides: dict | None = None, paper_scale: bool = False) -> dict:
    cfg = _merge_checked(DEFAULT_CONFIG, overrides or {})
    if paper_scale:
        cfg = _merge_checked(cfg, PAPER_SCALE_OVERRIDES)
    return cfg


def load_config(path, paper_scale: bool = False) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"missing config file: {path}")
    try:
        overrides = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    if not isinstance(overrides, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return make_config(overrides, paper_scale=paper_scale)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


class RunLedger:
    """Append-only JSONL record of pipeline stages and metric rows."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, kind: str, **fields):
        rec = {"kind": kind, "wall_clock": time.time(), **fields}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def metric_rows(self) -> list[dict]:
        if not self.path.is_file():
            return []
        rows = []
        for line in self.path.read_text().splitlines():
            rec = json.loads(line)
            if rec["kind"] == "metric":
                rec.pop("wall_clock", None)
                rows.append(rec)
        return rows


# ---------------------------------------------------------------------------
# dataset / model resolution


def resolve_dataset(cfg: dict) -> LabeledDataset:
    ds = cfg["dataset"]
    source = ds["source"]
    if source == "synthetic":
        return synth_generate(ds["profile"], ds["n_per_class"], ds["t_len"], ds["d"],
                              seed=cfg["seed"], n_classes=ds["n_classes"],
                              n_subjects=ds["n_subjects"], noise=ds["noise"])
    if source == "uci":
        if not ds["uci_root"]:
            raise DataError("dataset.source is 'uci' but dataset.uci_root is not set")
        return import_uci_har(ds["uci_root"])
    if source == "csv":
        if not ds["csv_manifest"]:
            raise DataError("dataset.source is 'csv' but dataset.csv_manifest is not set")
        return import_trial_csv(ds["csv_manifest"])
    if source == "stw":
        if not ds["stw_path"]:
            raise DataError("dataset.source is 'stw' but dataset.stw_path is not set")
        return import_stw(ds["stw_path"])
    raise ConfigError(f"unknown dataset source '{source}'")


def split_dataset(cfg: dict, data: LabeledDataset):
    plan = SplitPlan(cfg["split"]["classifier_frac"], cfg["split"]["generator_frac"],
                     cfg["split"]["test_frac"], disjoint=cfg["split"]["disjoint"],
                     seed=cfg["seed"])
    parts = split(data, plan)
    if cfg["dataset"]["normalize"]:
        parts = tuple(normalize(p) for p in parts)
    return parts


def classifier_spec(cfg: dict, data: LabeledDataset) -> ModelSpec:
    m = cfg["model"]
    t_len, d = data.window_shape
    arch = "gait_siamese_lstm" if data.paired else "har_cnn"
    return ModelSpec(arch, t_len, d, n_classes=data.n_classes,
                     conv_channels=tuple(m["conv_channels"]), kernel_t=m["kernel_t"],
                     dropout=m["dropout"], lstm_hidden=m["lstm_hidden"],
                     extractor_channels=tuple(m["extractor_channels"]),
                     encoder_widths=tuple(m["encoder_widths"]))


def generator_spec(cfg: dict, data: LabeledDataset) -> ModelSpec:
    m = cfg["model"]
    t_len, d = data.window_shape
    return ModelSpec("trigger_autoencoder", t_len, d, n_classes=data.n_classes,
                     encoder_widths=tuple(m["encoder_widths"]), kernel_t=m["kernel_t"])


def attack_config(cfg: dict, mode=None, target="unset", lam=None, seed=None) -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(
        mode=a["mode"] if mode is None else mode,
        target=a["target"] if target == "unset" else target,
        lam=a["lam"] if lam is None else lam,
        epochs=a["epochs"], batch_size=a["batch_size"], lr=a["lr"],
        query_mode=a["query_mode"], warmstart_epochs=a["warmstart_epochs"],
        seed=cfg["seed"] if seed is None else seed)


# ---------------------------------------------------------------------------
# evaluation helper


def evaluate_attack(classifier, batch, labels, mode, target, n_classes,
                    cfg_hash, seed, clean_windows=None, extra=None) -> AttackReport:
    clean_windows = batch.clean if clean_windows is None else clean_windows
    clean_preds = predict(classifier, clean_windows)
    poisoned_preds = predict(classifier, batch.poisoned32)
    y_adv = target_map(mode, labels, n_classes, target)
    mask = eligible_mask(mode, labels, y_adv)
    return AttackReport(
        mode=mode, target=target,
        asr=asr(poisoned_preds, y_adv, mask),
        mae=mae(batch.clean, batch.poisoned),
        mape=mape(batch.clean, batch.poisoned),
        clean_accuracy=float((clean_preds == labels).mean()),
        confusion_clean=confusion(clean_preds, labels, n_classes),
        confusion_poisoned=confusion(poisoned_preds, labels, n_classes),
        config_hash=cfg_hash, seed=seed, extra=extra or {})


def write_report_csv(path, reports: list[AttackReport], label_field: str = "stage"):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((label_field,) + AttackReport.CSV_FIELDS)
        for r in reports:
            w.writerow([r.extra.get(label_field, "")] + r.to_csv_row())


# ---------------------------------------------------------------------------
# pipelines


def _outdir(cfg: dict, out=None) -> Path:
    out = Path(out) if out else Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train_classifier(cfg: dict, out=None) -> dict:
    out = _outdir(cfg, out)
    h = config_hash(cfg)
    ledger = RunLedger(out / "ledger.jsonl")
    ledger.append("stage", stage="train_classifier", config_hash=h, seed=cfg["seed"])
    data = resolve_dataset(cfg)
    ctrain, _, test = split_dataset(cfg, data)
    model = build_model(classifier_spec(cfg, data), seed=cfg["seed"])
    tr = cfg["train"]
    log = train_classifier(model, ctrain, epochs=tr["epochs"],
                           batch_size=tr["batch_size"], lr=tr["lr"], seed=cfg["seed"])
    acc = accuracy(model, test)
    save_checkpoint(model, out / "classifier.ckpt")
    with open(out / "training_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "accuracy", "config_hash"])
        for i, (l, a) in enumerate(zip(log.losses, log.accuracies), start=1):
            w.writerow([i, f"{l:.6f}", f"{a:.6f}", h])
    ledger.append("metric", stage="train_classifier", config_hash=h,
                  clean_test_accuracy=round(acc, 6),
                  final_train_loss=round(log.losses[-1], 6) if log.losses else None)
    return {"clean_test_accuracy": acc, "checkpoint": str(out / "classifier.ckpt"),
            "config_hash": h}


def _load_classifier(out: Path):
    path = out / "classifier.ckpt"
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint: {path} (run train-classifier first)")
    return load_checkpoint(path)


def cmd_attack(cfg: dict, out=None, sweep_lam: bool = False,
               sweep_targets: bool = False) -> list[AttackReport]:
    out = _outdir(cfg, out)
    h = config_hash(cfg)
    ledger = RunLedger(out / "ledger.jsonl")
    classifier = _load_classifier(out)
    data = resolve_dataset(cfg)
    _, gtrain, test = split_dataset(cfg, data)
    k = classifier.spec.n_classes

    runs = []
    if sweep_targets and cfg["attack"]["mode"] == "all_to_one":
        runs = [("target", t, cfg["attack"]["lam"]) for t in range(k)]
    elif sweep_lam:
        runs = [("lam", cfg["attack"]["target"], lam) for lam in cfg["attack"]["lam_sweep"]]
    else:
        runs = [("single", cfg["attack"]["target"], cfg["attack"]["lam"])]

    reports = []
    for tag, target, lam in runs:
        acfg = attack_config(cfg, target=target, lam=lam)
        gen = build_model(generator_spec(cfg, data), seed=cfg["seed"] + 1)
        gen, log = train_generator(gen, classifier, gtrain, acfg)
        batch = apply_trigger(gen, test.windows)
        stage = f"attack_{tag}" + (f"_{target}" if tag == "target" else "") \
            + (f"_{lam}" if tag == "lam" else "")
        rep = evaluate_attack(classifier, batch, test.labels, acfg.mode, target, k,
                              h, cfg["seed"], extra={"stage": stage, "lam": lam})
        reports.append(rep)
        ledger.append("metric", stage=stage, config_hash=h, asr=round(rep.asr, 6),
                      mae=round(rep.mae, 6), mape=round(rep.mape, 4),
                      clean_accuracy=round(rep.clean_accuracy, 6))
        if tag == "single":
            save_checkpoint(gen, out / "generator.ckpt")
    write_report_csv(out / "attack_report.csv", reports)
    with open(out / "attack_report.json", "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)
    if cfg["output"]["plots"]:
        batch = apply_trigger(load_checkpoint(out / "generator.ckpt"), test.windows) \
            if (out / "generator.ckpt").is_file() else batch
        plots.overlay_panels(batch.clean, batch.poisoned32, out / "overlay.svg")
        plots.delta_traces(batch.delta, out / "delta_traces.svg")
    return reports


def cmd_baselines(cfg: dict, out=None) -> list[AttackReport]:
    out = _outdir(cfg, out)
    h = config_hash(cfg)
    ledger = RunLedger(out / "ledger.jsonl")
    classifier = _load_classifier(out)
    data = resolve_dataset(cfg)
    _, _, test = split_dataset(cfg, data)
    k = classifier.spec.n_classes
    b = cfg["baselines"]
    mode, target = cfg["attack"]["mode"], cfg["attack"]["target"]

    batches = [("random", baseline_random(test.windows, b["random_k"], cfg["seed"]))]
    for fk in b["fixed_k"]:
        batches.append((f"fixed_{fk}", baseline_fixed(test.windows, fk)))
    p, s, f = b["zero_mask"]
    batches.append((f"zero_mask_{p}_{s}_{f}", baseline_zero_mask(test.windows, p, s, f)))

    reports = []
    for name, batch in batches:
        rep = evaluate_attack(classifier, batch, test.labels, mode, target, k,
                              h, cfg["seed"], extra={"stage": name})
        reports.append(rep)
        ledger.append("metric", stage=name, config_hash=h, asr=round(rep.asr, 6),
                      mae=round(rep.mae, 6), mape=round(rep.mape, 4))
    write_report_csv(out / "baseline_report.csv", reports)
    return reports


def cmd_sweep(cfg: dict, axis: str, values=None, out=None) -> list[dict]:
    """One full attack pipeline per axis value.

    trigger_pct: share of the classifier's training data handed to the
    generator (overlapping split). disjoint_pct: share of the whole
    dataset used as a generator set disjoint from classifier training,
    with the test fraction held fixed.
    """
    out = _outdir(cfg, out)
    h = config_hash(cfg)
    ledger = RunLedger(out / "ledger.jsonl")
    if axis not in ("trigger_pct", "disjoint_pct"):
        raise ConfigError(f"unknown sweep axis '{axis}'")
    values = values or ([2, 10, 30, 70] if axis == "trigger_pct" else [10, 30, 50, 70])
    if not values:
        raise ConfigError("sweep values must be nonempty")
    data = resolve_dataset(cfg)
    k = data.n_classes
    rows = []
    for v in values:
        sub = copy.deepcopy(cfg)
        if axis == "trigger_pct":
            sub["split"]["generator_frac"] = v / 100.0
            sub["split"]["disjoint"] = False
        else:
            test_frac = cfg["split"]["test_frac"]
            sub["split"]["disjoint"] = True
            sub["split"]["generator_frac"] = v / 100.0
            sub["split"]["classifier_frac"] = max(1.0 - test_frac - v / 100.0, 0.05)
        ctrain, gtrain, test = split_dataset(sub, data)
        if axis == "disjoint_pct":
            shared = set(map(int, ctrain.meta["source_indices"])) & \
                set(map(int, gtrain.meta["source_indices"]))
            if shared:
                raise DataError(f"disjoint sweep: {len(shared)} shared indices")
        model = build_model(classifier_spec(sub, data), seed=sub["seed"])
        tr = sub["train"]
        train_classifier(model, ctrain, epochs=tr["epochs"], batch_size=tr["batch_size"],
                         lr=tr["lr"], seed=sub["seed"])
        acfg = attack_config(sub)
        gen = build_model(generator_spec(sub, data), seed=sub["seed"] + 1)
        gen, _ = train_generator(gen, model, gtrain, acfg)
        batch = apply_trigger(gen, test.windows)
        rep = evaluate_attack(model, batch, test.labels, acfg.mode, acfg.target, k,
                              h, sub["seed"], extra={"stage": f"{axis}_{v}"})
        row = {"axis": axis, "value": v, "asr": rep.asr, "mae": rep.mae,
               "clean_accuracy": rep.clean_accuracy}
        rows.append(row)
        ledger.append("metric", stage=f"{axis}_{v}", config_hash=h,
                      asr=round(rep.asr, 6), mae=round(rep.mae, 6))
    with open(out / f"sweep_{axis}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "asr", "mae", "clean_accuracy", "config_hash"])
        for r in rows:
            w.writerow([r["axis"], r["value"], f"{r['asr']:.6f}", f"{r['mae']:.6f}",
                        f"{r['clean_accuracy']:.6f}", h])
    return rows


def cmd_defend(cfg: dict, defense: str, out=None) -> dict:
    out = _outdir(cfg, out)
    h = config_hash(cfg)
    ledger = RunLedger(out / "ledger.jsonl")
    classifier = _load_classifier(out)
    gen_path = out / "generator.ckpt"
    if not gen_path.is_file():
        raise CheckpointError(f"missing checkpoint: {gen_path} (run attack first)")
    gen = load_checkpoint(gen_path)
    data = resolve_dataset(cfg)
    ctrain, gtrain, test = split_dataset(cfg, data)
    k = classifier.spec.n_classes
    mode, target = cfg["attack"]["mode"], cfg["attack"]["target"]

    if defense == "cluster":
        cl = cfg["defenses"]["cluster"]
        params = ClusterParams(perplexity=cl["perplexity"], iterations=int(cl["iterations"]),
                               learning_rate=cl["learning_rate"], seed=cfg["seed"],
                               detection_threshold=cl["detection_threshold"])
        pool = np.concatenate([ctrain.windows, test.windows])
        clean_pred = predict(classifier, pool)
        clean_target = pool[clean_pred == target]
        batch = apply_trigger(gen, test.windows)
        pois_pred = predict(classifier, batch.poisoned32)
        poisoned_target = batch.poisoned32[pois_pred == target]
        verdict = clustering_defense(classifier, clean_target, poisoned_target, params)
        result = {"defense": "cluster", "purity": verdict.purity,
                  "silhouette": verdict.silhouette, "detected": verdict.detected}
        ledger.append("metric", stage="defend_cluster", config_hash=h,
                      purity=round(verdict.purity, 6),
                      silhouette=round(verdict.silhouette, 6), detected=verdict.detected)
        with open(out / "cluster_points.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "provenance", "cluster"])
            for (xx, yy), prov, cl_ in zip(verdict.embedding, verdict.provenance,
                                           verdict.assignments):
                w.writerow([f"{xx:.6f}", f"{yy:.6f}", prov, int(cl_)])
        if cfg["output"]["plots"]:
            plots.cluster_panels(verdict.embedding, verdict.provenance,
                                 verdict.assignments, out / "cluster_panels.svg")
        return result

    if defense == "prune":
        frac = cfg["defenses"]["prune_fraction"]
        batch = apply_trigger(gen, test.windows)
        rows = {}
        base = evaluate_attack(classifier, batch, test.labels, mode, target, k, h,
                               cfg["seed"], clean_windows=test.windows)
        rows["unpruned"] = {"asr": base.asr, "clean_accuracy": accuracy(classifier, test)}
        for scope in ("local", "global"):
            pruned = prune(classifier, frac, scope=scope)
            rep = evaluate_attack(pruned, batch, test.labels, mode, target, k, h,
                                  cfg["seed"], clean_windows=test.windows)
            rows[scope] = {"asr": rep.asr, "clean_accuracy": accuracy(pruned, test)}
            ledger.append("metric", stage=f"defend_prune_{scope}", config_hash=h,
                          asr=round(rep.asr, 6),
                          clean_accuracy=round(rows[scope]["clean_accuracy"], 6))
        with open(out / "prune_report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "asr", "clean_accuracy", "fraction", "config_hash"])
            for name, r in rows.items():
                w.writerow([name, f"{r['asr']:.6f}", f"{r['clean_accuracy']:.6f}",
                            frac if name != "unpruned" else 0.0, h])
        return {"defense": "prune", "fraction": frac, "rows": rows}

    if defense == "advtrain":
        adv = cfg["defenses"]["advtrain"]
        batch = apply_trigger(gen, test.windows)
        pre_poisoned_acc = float((predict(classifier, batch.poisoned32) == test.labels).mean())
        pre_clean_acc = accuracy(classifier, test)
        hardened, _ = adversarial_train(classifier, gen, ctrain, epochs=adv["epochs"],
                                        mix_ratio=adv["mix_ratio"],
                                        batch_size=cfg["train"]["batch_size"],
                                        lr=cfg["train"]["lr"], seed=cfg["seed"])
        post_poisoned_acc = float((predict(hardened, batch.poisoned32) == test.labels).mean())
        post_clean_acc = accuracy(hardened, test)
        y_adv = target_map(mode, test.labels, k, target)
        mask = eligible_mask(mode, test.labels, y_adv)
        old_asr_before = asr(predict(classifier, batch.poisoned32), y_adv, mask)
        old_asr_after = asr(predict(hardened, batch.poisoned32), y_adv, mask)
        fresh = build_model(generator_spec(cfg, data), seed=cfg["seed"] + 2)
        _, rearmed = rearm(hardened, fresh, gtrain, test, attack_config(cfg),
                           config_hash=h)
        save_checkpoint(hardened, out / "hardened_classifier.ckpt")
        result = {
            "defense": "advtrain",
            "pre_clean_accuracy": pre_clean_acc,
            "post_clean_accuracy": post_clean_acc,
            "pre_poisoned_accuracy": pre_poisoned_acc,
            "post_poisoned_accuracy": post_poisoned_acc,
            "old_generator_asr_before": old_asr_before,
            "old_generator_asr_after": old_asr_after,
            "new_generator_asr": rearmed.asr,
        }
        ledger.append("metric", stage="defend_advtrain", config_hash=h,
                      **{kk: round(vv, 6) if isinstance(vv, float) else vv
                         for kk, vv in result.items() if kk != "defense"})
        with open(out / "advtrain_report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value", "config_hash"])
            for kk, vv in result.items():
                if kk != "defense":
                    w.writerow([kk, f"{vv:.6f}", h])
        return result

    raise ConfigError(f"unknown defense '{defense}'")


def cmd_export_dataset(cfg: dict, path, out=None) -> dict:
    data = resolve_dataset(cfg)
    export_stw(data, path)
    return {"count": len(data), "path": str(path)}


def cmd_import_dataset(path) -> dict:
    data = import_stw(path)
    t_len, d = data.window_shape
    return {"count": len(data), "t_len": t_len, "d": d, "n_classes": data.n_classes,
            "provenance": data.provenance, "paired": data.paired}
