"""Command-line entry point.

Subcommands mirror the experiment pipelines: train-classifier, attack,
baselines, sweep, defend, export-dataset, import-dataset. Failures exit
nonzero with one machine-parsable line on stderr:
    ERR <CODE>: <message>
Exit codes: 0 ok, 2 config error, 3 data error, 4 checkpoint error,
5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .autodiff import NonFiniteOutput
from .checkpoint import CheckpointError
from .datasets import DataError
from .experiments import (
    ConfigError,
    cmd_attack,
    cmd_baselines,
    cmd_defend,
    cmd_export_dataset,
    cmd_import_dataset,
    cmd_sweep,
    cmd_train_classifier,
    config_hash,
    load_config,
    make_config,
)

_EXIT_CODES = (
    (ConfigError, 2, "CONFIG"),
    (CheckpointError, 4, "CHECKPOINT"),
    (DataError, 3, "DATA"),
    (NonFiniteOutput, 5, "NUMERIC"),
    (FloatingPointError, 5, "NUMERIC"),
)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="triggerlab",
                                 description="Dynamic-trigger backdoor lab for "
                                             "time-series sensor classifiers")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config overriding defaults")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--paper-scale", action="store_true",
                        help="full-scale settings (200 epochs) instead of desk scale")

    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("train-classifier", parents=[common],
                   help="train the classifier and write its checkpoint")
    p = sub.add_parser("attack", parents=[common],
                       help="train the trigger generator and evaluate the attack")
    p.add_argument("--sweep-targets", action="store_true",
                   help="one run per target class (all-to-one)")
    p.add_argument("--sweep-lam", action="store_true",
                   help="one run per perturbation weight in attack.lam_sweep")
    sub.add_parser("baselines", parents=[common],
                   help="evaluate random/fixed/zero-mask triggers")
    p = sub.add_parser("sweep", parents=[common], help="axis sweeps over data share")
    p.add_argument("--axis", choices=("trigger_pct", "disjoint_pct"), required=True)
    p.add_argument("--values", type=int, nargs="+", help="percent values for the axis")
    p = sub.add_parser("defend", parents=[common], help="run one defense")
    p.add_argument("--defense", choices=("cluster", "prune", "advtrain"), required=True)
    p = sub.add_parser("export-dataset", parents=[common],
                       help="write the configured dataset as an .stw file")
    p.add_argument("--path", required=True)
    p = sub.add_parser("import-dataset", parents=[common],
                       help="read an .stw file and print its summary")
    p.add_argument("--path", required=True)
    return ap


def _config_from_args(args) -> dict:
    if args.config:
        cfg = load_config(args.config, paper_scale=args.paper_scale)
    else:
        cfg = make_config(paper_scale=args.paper_scale)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        cfg["output"]["dir"] = args.out
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        out = cfg["output"]["dir"]
        if args.command == "train-classifier":
            res = cmd_train_classifier(cfg, out)
        elif args.command == "attack":
            reports = cmd_attack(cfg, out, sweep_lam=args.sweep_lam,
                                 sweep_targets=args.sweep_targets)
            res = [r.to_dict() for r in reports]
        elif args.command == "baselines":
            res = [r.to_dict() for r in cmd_baselines(cfg, out)]
        elif args.command == "sweep":
            res = cmd_sweep(cfg, args.axis, values=args.values, out=out)
        elif args.command == "defend":
            res = cmd_defend(cfg, args.defense, out)
        elif args.command == "export-dataset":
            res = cmd_export_dataset(cfg, args.path, out)
        elif args.command == "import-dataset":
            res = cmd_import_dataset(args.path)
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigError(f"unknown command {args.command}")
        print(json.dumps({"config_hash": config_hash(cfg), "result": res}, indent=2,
                         default=str))
        return 0
    except tuple(exc for exc, _, _ in _EXIT_CODES) as e:
        for exc_type, code, tag in _EXIT_CODES:
            if isinstance(e, exc_type):
                print(f"ERR {tag}: {e}", file=sys.stderr)
                return code
        raise  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
