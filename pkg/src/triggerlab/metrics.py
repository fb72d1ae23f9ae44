"""Attack evaluation: success rate, perturbation size, confusion matrices.

Perturbation metrics are computed in raw sensor units; the sign-based
fixed baseline at magnitude k therefore scores a mean absolute error of
exactly k. The percentage metric guards division by zero with a small
floor on |x| but never clamps the ratio itself, so near-zero samples can
legitimately push it past 100%.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MAPE_FLOOR = 1e-3  # raw sensor units

REPORT_SCHEMA_VERSION = 1


def eligible_mask(mode: str, y_true, y_adv) -> np.ndarray:
    """Which samples count toward the success rate.

    For all_to_one, samples already belonging to the target class are
    excluded (success on them is vacuous); for all_to_all every sample
    counts.
    """
    y_true, y_adv = np.asarray(y_true), np.asarray(y_adv)
    if mode == "all_to_one":
        return y_true != y_adv
    return np.ones(len(y_true), dtype=bool)


def asr(preds, y_adv, eligible=None) -> float:
    """Fraction of eligible triggered samples classified as their
    adversarial target."""
    preds, y_adv = np.asarray(preds), np.asarray(y_adv)
    if preds.shape != y_adv.shape:
        raise ValueError(f"asr: shapes {preds.shape} and {y_adv.shape} differ")
    mask = np.ones(len(preds), dtype=bool) if eligible is None else np.asarray(eligible, dtype=bool)
    if mask.shape != preds.shape:
        raise ValueError(f"asr: eligibility mask shape {mask.shape} does not match {preds.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("asr: empty eligible set")
    return float((preds[mask] == y_adv[mask]).sum() / n)


def mae(x, x_poisoned) -> float:
    """Mean absolute difference between clean and poisoned data."""
    x, xp = np.asarray(x), np.asarray(x_poisoned)
    if x.shape != xp.shape:
        raise ValueError(f"mae: shapes {x.shape} and {xp.shape} differ")
    return float(np.abs(xp.astype(np.float64) - x.astype(np.float64)).mean())


def mape(x, x_poisoned, floor: float = MAPE_FLOOR) -> float:
    """Mean absolute percentage deviation; |x| floored at `floor` to keep
    zero-crossing sensor values from dividing by zero."""
    x, xp = np.asarray(x), np.asarray(x_poisoned)
    if x.shape != xp.shape:
        raise ValueError(f"mape: shapes {x.shape} and {xp.shape} differ")
    if floor <= 0:
        raise ValueError("mape: floor must be positive")
    x64, xp64 = x.astype(np.float64), xp.astype(np.float64)
    denom = np.maximum(np.abs(x64), floor)
    return float(100.0 * (np.abs(xp64 - x64) / denom).mean())


def confusion(preds, truth, n_classes: int) -> np.ndarray:
    """Counts matrix: cell (i, j) is samples of true class i predicted j."""
    preds, truth = np.asarray(preds, dtype=np.int64), np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise ValueError(f"confusion: shapes {preds.shape} and {truth.shape} differ")
    if len(preds) and (preds.min() < 0 or preds.max() >= n_classes
                       or truth.min() < 0 or truth.max() >= n_classes):
        raise ValueError(f"confusion: label out of range [0, {n_classes})")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (truth, preds), 1)
    return m


def accuracy_from_confusion(m: np.ndarray) -> float:
    total = m.sum()
    return float(np.trace(m) / total) if total else 0.0


@dataclass
class AttackReport:
    """One evaluated attack: efficacy, stealth, and bookkeeping."""

    mode: str
    target: int | None
    asr: float
    mae: float
    mape: float
    clean_accuracy: float
    confusion_clean: np.ndarray
    confusion_poisoned: np.ndarray
    config_hash: str
    seed: int
    schema_version: int = REPORT_SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.asr <= 1 or not 0 <= self.clean_accuracy <= 1:
            raise ValueError("asr and clean_accuracy must lie in [0, 1]")
        if self.mae < 0 or self.mape < 0:
            raise ValueError("mae and mape must be nonnegative")

    CSV_FIELDS = ("schema_version", "config_hash", "seed", "mode", "target",
                  "asr", "mae", "mape", "clean_accuracy",
                  "confusion_clean", "confusion_poisoned")

    def to_csv_row(self) -> list[str]:
        vals = {
            "schema_version": str(self.schema_version),
            "config_hash": self.config_hash,
            "seed": str(self.seed),
            "mode": self.mode,
            "target": "" if self.target is None else str(self.target),
            "asr": f"{self.asr:.6f}",
            "mae": f"{self.mae:.6f}",
            "mape": f"{self.mape:.4f}",
            "clean_accuracy": f"{self.clean_accuracy:.6f}",
            "confusion_clean": json.dumps(self.confusion_clean.tolist()),
            "confusion_poisoned": json.dumps(self.confusion_poisoned.tolist()),
        }
        return [vals[f] for f in self.CSV_FIELDS]

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "mode": self.mode,
            "target": self.target,
            "asr": self.asr,
            "mae": self.mae,
            "mape": self.mape,
            "clean_accuracy": self.clean_accuracy,
            "confusion_clean": self.confusion_clean.tolist(),
            "confusion_poisoned": self.confusion_poisoned.tolist(),
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        d = dict(d)
        d["confusion_clean"] = np.asarray(d["confusion_clean"], dtype=np.int64)
        d["confusion_poisoned"] = np.asarray(d["confusion_poisoned"], dtype=np.int64)
        return cls(**d)
