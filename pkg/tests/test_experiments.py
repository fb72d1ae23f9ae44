import json

import numpy as np
import pytest

from triggerlab.cli import main
from triggerlab.experiments import (
    ConfigError,
    RunLedger,
    cmd_attack,
    cmd_baselines,
    cmd_defend,
    cmd_sweep,
    cmd_train_classifier,
    config_hash,
    load_config,
    make_config,
)

TINY = {
    "seed": 3,
    "dataset": {"n_per_class": 12, "t_len": 16, "d": 3, "noise": 0.3},
    "model": {"encoder_widths": [32, 16, 8]},
    "train": {"epochs": 4},
    "attack": {"epochs": 4},
    "defenses": {"cluster": {"perplexity": 4.0, "iterations": 60},
                 "advtrain": {"epochs": 3, "mix_ratio": 0.5}},
    "output": {"plots": False},
}


def tiny_config(**extra):
    over = json.loads(json.dumps(TINY))
    over.update(extra)
    return make_config(over)


# ---------------------------------------------------------------------------
# config handling


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key 'datasett'"):
        make_config({"datasett": {}})
    with pytest.raises(ConfigError, match="attack.lambda"):
        make_config({"attack": {"lambda": 0.1}})


def test_config_hash_stable_and_sensitive():
    a, b = tiny_config(), tiny_config()
    assert config_hash(a) == config_hash(b)
    c = tiny_config(seed=4)
    assert config_hash(a) != config_hash(c)


def test_load_config_roundtrip(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    cfg = load_config(p)
    assert cfg["dataset"]["t_len"] == 16
    assert cfg["baselines"]["fixed_k"] == [1.0, 5.0]  # default preserved


def test_load_config_bad_json(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


def test_paper_scale_overrides():
    cfg = make_config(TINY, paper_scale=True)
    assert cfg["train"]["epochs"] == 200
    assert cfg["attack"]["epochs"] == 200


# ---------------------------------------------------------------------------
# pipelines on a tiny task


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config()
    res = cmd_train_classifier(cfg, out)
    return out, cfg, res


def test_train_classifier_outputs(trained_dir):
    out, cfg, res = trained_dir
    assert (out / "classifier.ckpt").is_file()
    assert (out / "training_log.csv").is_file()
    assert 0 <= res["clean_test_accuracy"] <= 1
    rows = RunLedger(out / "ledger.jsonl").metric_rows()
    assert any(r["stage"] == "train_classifier" for r in rows)
    assert all(r["config_hash"] == config_hash(cfg) for r in rows)


def test_attack_without_checkpoint_fails(tmp_path):
    from triggerlab.checkpoint import CheckpointError

    with pytest.raises(CheckpointError, match="train-classifier first"):
        cmd_attack(tiny_config(), tmp_path)


def test_attack_and_baselines_and_defenses(trained_dir):
    out, cfg, _ = trained_dir
    reports = cmd_attack(cfg, out)
    assert len(reports) == 1
    assert (out / "generator.ckpt").is_file()
    assert (out / "attack_report.csv").is_file()

    base = cmd_baselines(cfg, out)
    names = [r.extra["stage"] for r in base]
    assert names == ["random", "fixed_1.0", "fixed_5.0", "zero_mask_50_5_3"]
    fixed1 = base[1]
    assert fixed1.mae == 1.0
    assert base[2].mae == 5.0

    res = cmd_defend(cfg, "prune", out)
    assert set(res["rows"]) == {"unpruned", "local", "global"}
    assert (out / "prune_report.csv").is_file()

    res = cmd_defend(cfg, "advtrain", out)
    assert "new_generator_asr" in res
    assert (out / "advtrain_report.csv").is_file()
    assert (out / "hardened_classifier.ckpt").is_file()


def test_attack_target_sweep_rows(trained_dir):
    out, cfg, _ = trained_dir
    reports = cmd_attack(cfg, out, sweep_targets=True)
    assert len(reports) == cfg["dataset"]["n_classes"]
    targets = [r.target for r in reports]
    assert targets == list(range(6))


def test_sweep_trigger_pct(trained_dir):
    out, cfg, _ = trained_dir
    rows = cmd_sweep(cfg, "trigger_pct", values=[20, 70], out=out)
    assert [r["value"] for r in rows] == [20, 70]
    assert (out / "sweep_trigger_pct.csv").is_file()


def test_sweep_disjoint_verifies_disjointness(trained_dir):
    out, cfg, _ = trained_dir
    rows = cmd_sweep(cfg, "disjoint_pct", values=[10], out=out)
    assert rows[0]["value"] == 10


def test_sweep_bad_axis(trained_dir):
    out, cfg, _ = trained_dir
    with pytest.raises(ConfigError, match="axis"):
        cmd_sweep(cfg, "nonsense", out=out)


# ---------------------------------------------------------------------------
# determinism of replayed pipelines


def test_pipeline_replay_reproduces_metric_rows(tmp_path):
    cfg = tiny_config()
    rows = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        cmd_train_classifier(cfg, out)
        cmd_attack(cfg, out)
        rows.append(RunLedger(out / "ledger.jsonl").metric_rows())
    assert rows[0] == rows[1]


# ---------------------------------------------------------------------------
# CLI surface


def run_cli(args):
    return main(args)


def test_cli_export_import_dataset(tmp_path, capsys):
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(TINY))
    stw = tmp_path / "data.stw"
    assert run_cli(["export-dataset", "--config", str(cfgp), "--path", str(stw),
                    "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert run_cli(["import-dataset", "--path", str(stw), "--out", str(tmp_path)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["result"]["count"] == 72  # 12 windows x 6 classes


def test_cli_exit_codes(tmp_path, capsys):
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text('{"nope": 1}')
    assert run_cli(["train-classifier", "--config", str(bad_cfg)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("ERR CONFIG:") and "\n" == err[-1]

    assert run_cli(["attack", "--out", str(tmp_path / "empty")]) == 4
    assert capsys.readouterr().err.startswith("ERR CHECKPOINT:")

    assert run_cli(["import-dataset", "--path", str(tmp_path / "missing.stw"),
                    "--out", str(tmp_path)]) == 3
    assert capsys.readouterr().err.startswith("ERR DATA:")


def test_cli_train_and_rerun_identical(tmp_path, capsys):
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(TINY))
    out = tmp_path / "run"
    assert run_cli(["train-classifier", "--config", str(cfgp), "--out", str(out)]) == 0
    first = json.loads(capsys.readouterr().out)["result"]["clean_test_accuracy"]
    assert run_cli(["train-classifier", "--config", str(cfgp), "--out", str(out)]) == 0
    second = json.loads(capsys.readouterr().out)["result"]["clean_test_accuracy"]
    assert first == second
