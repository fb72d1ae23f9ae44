"""Trigger-attack engine: generator training, trigger application, baselines.

The generator is trained purely against the frozen classifier's outputs.
Two query modes realize the black-box loop:

* gradient_oracle (default) — backpropagates the total loss through the
  frozen classifier to the generator without ever reading or writing the
  classifier's parameters through any other channel.
* score_function — estimates the gradient of the misclassification loss
  w.r.t. the perturbation from output probabilities alone, using
  antithetic Gaussian smoothing, then backpropagates only through the
  generator. Strictly query-only, slower to converge.

A cryptographic hash of the classifier parameters is checked before and
after training; any drift is a bug and raises.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward
from .datasets import DataError, LabeledDataset
from .models import (
    ModelState,
    TrainingLog,
    _ensure_batch,
    forward,
    freeze,
    generate_trigger,
    iterate_batches,
    param_hash,
)

ATTACK_MODES = ("all_to_one", "all_to_all")
QUERY_MODES = ("gradient_oracle", "score_function")


class AttackError(ValueError):
    """Invalid attack configuration or inputs."""


@dataclass
class AttackConfig:
    mode: str = "all_to_one"
    target: int | None = 0
    lam: float = 0.1                  # perturbation-loss weight
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    query_mode: str = "gradient_oracle"
    seed: int = 0
    probe_fraction: float = 0.1       # held out from generator data for ASR logging
    warmstart_epochs: int = 0         # optional reconstruction pre-training
    nes_samples: int = 24             # score_function smoothing directions per batch
    nes_sigma: float = 0.05

    def __post_init__(self):
        if self.mode not in ATTACK_MODES:
            raise AttackError(f"unknown attack mode '{self.mode}'")
        if self.query_mode not in QUERY_MODES:
            raise AttackError(f"unknown query mode '{self.query_mode}'")
        if self.lam < 0:
            raise AttackError(f"lam must be nonnegative, got {self.lam}")
        if self.mode == "all_to_one" and self.target is None:
            raise AttackError("all_to_one mode needs a target class")


def target_map(mode: str, y_true, n_classes: int, target: int | None = None) -> np.ndarray:
    """Adversarial label for each true label: the fixed target class for
    all_to_one, the next class modulo K for all_to_all."""
    y = np.asarray(y_true)
    if np.any(y >= n_classes) or np.any(y < 0):
        raise AttackError(f"true label outside [0, {n_classes})")
    if mode == "all_to_one":
        if target is None or not 0 <= target < n_classes:
            raise AttackError(f"target {target} outside [0, {n_classes})")
        return np.full(y.shape, target, dtype=np.int32)
    if mode == "all_to_all":
        return ((y + 1) % n_classes).astype(np.int32)
    raise AttackError(f"unknown attack mode '{mode}'")


@dataclass
class PoisonedBatch:
    """Clean windows, additive triggers, and their sums.

    clean and delta are float32; poisoned is their float64 sum, which is
    exact at sensor magnitudes, so poisoned - clean == delta and
    poisoned - delta == clean hold bit-level and the fixed baseline's
    mean absolute perturbation comes out exactly k. Models consume the
    float32 cast of poisoned (poisoned32), which is bit-identical to
    float32 addition of clean and delta.
    """

    clean: np.ndarray
    delta: np.ndarray
    poisoned: np.ndarray
    y_adv: np.ndarray | None = None

    @property
    def poisoned32(self) -> np.ndarray:
        return self.poisoned.astype(np.float32)

    @classmethod
    def from_delta(cls, clean, delta, y_adv=None) -> "PoisonedBatch":
        clean = np.ascontiguousarray(clean, dtype=np.float32)
        delta = np.ascontiguousarray(delta, dtype=np.float32)
        if clean.shape != delta.shape:
            raise AttackError(f"delta shape {delta.shape} does not match input {clean.shape}")
        poisoned = clean.astype(np.float64) + delta.astype(np.float64)
        return cls(clean=clean, delta=delta, poisoned=poisoned, y_adv=y_adv)

    @classmethod
    def from_poisoned(cls, clean, poisoned, y_adv=None) -> "PoisonedBatch":
        clean = np.ascontiguousarray(clean, dtype=np.float32)
        poisoned32 = np.ascontiguousarray(poisoned, dtype=np.float32)
        if clean.shape != poisoned32.shape:
            raise AttackError(f"poisoned shape {poisoned32.shape} does not match input {clean.shape}")
        delta = (poisoned32.astype(np.float64) - clean.astype(np.float64)).astype(np.float32)
        return cls.from_delta(clean, delta, y_adv)


# ---------------------------------------------------------------------------
# trigger application


def _pair_delta(gen: ModelState, x: np.ndarray) -> np.ndarray:
    """For signal pairs only the probe (second) signal is perturbed; the
    enrolled signal travels untouched."""
    probe_delta = generate_trigger(gen, x[:, 1])
    delta = np.zeros_like(x)
    delta[:, 1] = probe_delta
    return delta


def apply_trigger(gen: ModelState, x: np.ndarray, y_adv=None) -> PoisonedBatch:
    """Generate per-input triggers and add them onto the batch."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim == 4 and x.shape[1] == 2:
        delta = _pair_delta(gen, x)
    else:
        delta = generate_trigger(gen, x)
    return PoisonedBatch.from_delta(x, delta, y_adv)


# ---------------------------------------------------------------------------
# baselines


def baseline_random(x: np.ndarray, k: float, seed: int) -> PoisonedBatch:
    """Uniform(-k, k) i.i.d. perturbation, seeded."""
    if k <= 0:
        raise AttackError(f"random baseline needs k > 0, got {k}")
    rng = np.random.default_rng([seed, 41])
    x = np.ascontiguousarray(x, dtype=np.float32)
    delta = rng.uniform(-k, k, size=x.shape).astype(np.float32)
    return PoisonedBatch.from_delta(x, delta)


def baseline_fixed(x: np.ndarray, k: float) -> PoisonedBatch:
    """+k where the sensor value is positive, else -k; zero counts as positive."""
    if k <= 0:
        raise AttackError(f"fixed baseline needs k > 0, got {k}")
    x = np.ascontiguousarray(x, dtype=np.float32)
    delta = np.where(x >= 0, np.float32(k), np.float32(-k))
    return PoisonedBatch.from_delta(x, delta)


def baseline_zero_mask(x: np.ndarray, period: int, span: int, feature_stride: int) -> PoisonedBatch:
    """Zero out `span` adjacent time steps every `period` steps on every
    `feature_stride`-th channel (the 50/5/3-style masking scheme)."""
    if not (period >= span >= 1) or feature_stride < 1:
        raise AttackError(f"zero mask needs period >= span >= 1 and stride >= 1, "
                          f"got ({period}/{span}/{feature_stride})")
    x = np.ascontiguousarray(x, dtype=np.float32)
    t_len, d = x.shape[-2], x.shape[-1]
    t_idx = np.zeros(t_len, dtype=bool)
    for start in range(0, t_len, period):
        t_idx[start:start + span] = True
    c_idx = np.arange(d) % feature_stride == 0
    poisoned = x.copy()
    poisoned[..., t_idx[:, None] & c_idx[None, :]] = 0.0
    return PoisonedBatch.from_poisoned(x, poisoned)


# ---------------------------------------------------------------------------
# generator training


def _probe_split(n: int, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_probe = min(max(1, int(round(fraction * n))), n - 1) if n > 1 else 0
    return perm[n_probe:], perm[:n_probe]


def _classifier_logits(classifier, x_tensor, paired_clean=None):
    """Forward the (possibly pair-structured) poisoned input through the
    frozen classifier. For pairs, x_tensor is the poisoned probe and
    paired_clean the untouched enrolled signal batch."""
    if paired_clean is None:
        return forward(classifier, x_tensor)
    n, t_len, d = x_tensor.data.shape
    enrolled = ad.reshape(Tensor(paired_clean), (n, 1, t_len, d))
    probe = ad.reshape(x_tensor, (n, 1, t_len, d))
    return forward(classifier, ad.concat([enrolled, probe], axis=1))


def _nes_gradient(classifier, x_clean, delta, y_adv, cfg, rng, paired_clean=None):
    """Antithetic Gaussian-smoothing estimate of d L_B / d delta using only
    the classifier's output probabilities."""
    n_dir, sigma = cfg.nes_samples, cfg.nes_sigma
    grad = np.zeros_like(delta)

    def lb_of(d_try):
        batch = PoisonedBatch.from_delta(x_clean, d_try)
        if paired_clean is None:
            logits = forward(classifier, Tensor(batch.poisoned32)).data
        else:
            logits = _classifier_logits(classifier, Tensor(batch.poisoned32), paired_clean).data
        probs = ad.softmax(Tensor(logits)).data
        eps = np.finfo(np.float32).tiny
        return float(-np.log(probs[np.arange(len(y_adv)), y_adv] + eps).mean())

    for _ in range(n_dir):
        u = rng.standard_normal(delta.shape).astype(np.float32)
        hi = lb_of(delta + sigma * u)
        lo = lb_of(delta - sigma * u)
        grad += (hi - lo) / (2 * sigma) * u
    return grad / n_dir


def train_generator(gen: ModelState, classifier: ModelState, data: LabeledDataset,
                    cfg: AttackConfig) -> tuple[ModelState, TrainingLog]:
    """Train the trigger generator against a frozen classifier.

    Per batch: delta = G(x); x' = x + delta; the classifier is queried on
    x'; the total loss is the batch mean of per-sample cross-entropy
    toward the adversarial label plus lam times the per-sample squared
    perturbation norm; only the generator parameters are updated.
    """
    if len(data) == 0:
        raise AttackError("train_generator: empty dataset")
    if gen.spec.arch != "trigger_autoencoder":
        raise AttackError("train_generator: gen must be a trigger_autoencoder")
    if (gen.spec.t_len, gen.spec.d) != (classifier.spec.t_len, classifier.spec.d):
        raise AttackError(f"generator window {(gen.spec.t_len, gen.spec.d)} does not match "
                          f"classifier window {(classifier.spec.t_len, classifier.spec.d)}")
    if data.window_shape != (gen.spec.t_len, gen.spec.d):
        raise AttackError(f"data window {data.window_shape} does not match generator "
                          f"{(gen.spec.t_len, gen.spec.d)}")

    freeze(classifier)
    hash_before = param_hash(classifier)
    k = classifier.spec.n_classes
    paired = data.paired

    gen.set_trainable(True)
    opt = Adam(gen.parameters(), lr=cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 51])
    nes_rng = np.random.default_rng([cfg.seed, 52])

    train_idx, probe_idx = _probe_split(len(data), cfg.probe_fraction,
                                        np.random.default_rng([cfg.seed, 53]))
    probe = data.subset(probe_idx) if len(probe_idx) else None

    if cfg.warmstart_epochs > 0:
        windows = data.windows[train_idx]
        flat = windows[:, 1] if paired else windows
        from .models import warmstart_autoencoder
        warmstart_autoencoder(gen, flat, cfg.warmstart_epochs,
                              batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)

    log = TrainingLog(extra={"lb": [], "lp": [], "probe_asr": []})
    for _ in range(cfg.epochs):
        lb_sum, lp_sum, seen = 0.0, 0.0, 0
        for bidx in iterate_batches(len(train_idx), cfg.batch_size, shuffle_rng):
            idx = train_idx[bidx]
            x = data.windows[idx]
            y_adv = target_map(cfg.mode, data.labels[idx], k, cfg.target)
            n = len(idx)
            x_gen = x[:, 1] if paired else x
            x_gen_t = Tensor(np.ascontiguousarray(x_gen))
            delta = forward(gen, x_gen_t)

            if cfg.query_mode == "gradient_oracle":
                x_pois = ad.add(x_gen_t, delta)
                logits = _classifier_logits(classifier, x_pois,
                                            paired_clean=x[:, 0] if paired else None)
                lb = ad.cross_entropy(logits, y_adv)
                lp = ad.scale(ad.l2_norm_sq(delta), 1.0 / n)
                total = ad.add(lb, ad.scale(lp, cfg.lam))
            else:  # score_function: classifier queried for probabilities only
                g_hat = _nes_gradient(classifier, x_gen, delta.data, y_adv, cfg, nes_rng,
                                      paired_clean=x[:, 0] if paired else None)
                batch = PoisonedBatch.from_delta(x_gen, delta.data)
                if paired:
                    logits = _classifier_logits(classifier, Tensor(batch.poisoned32), x[:, 0]).data
                else:
                    logits = forward(classifier, Tensor(batch.poisoned32)).data
                lb = ad.cross_entropy(Tensor(logits), y_adv)
                lp = ad.scale(ad.l2_norm_sq(delta), 1.0 / n)
                surrogate = ad.sum_(ad.mul(delta, Tensor(g_hat)))
                total = ad.add(surrogate, ad.scale(lp, cfg.lam))

            backward(total)
            opt.step()
            lb_sum += lb.item() * n
            lp_sum += lp.item() * n
            seen += n

        log.losses.append((lb_sum + cfg.lam * lp_sum) / seen)
        log.extra["lb"].append(lb_sum / seen)
        log.extra["lp"].append(lp_sum / seen)
        log.extra["probe_asr"].append(_probe_asr(gen, classifier, probe, cfg, k))

    if param_hash(classifier) != hash_before:
        raise ad.GraphError("train_generator: classifier parameters changed")
    gen.meta["epochs_seen"] = gen.meta.get("epochs_seen", 0) + cfg.epochs
    gen.meta["attack_mode"] = cfg.mode
    return gen, log


def _probe_asr(gen, classifier, probe, cfg, k):
    if probe is None or len(probe) == 0:
        return float("nan")
    from .metrics import asr, eligible_mask
    batch = apply_trigger(gen, probe.windows)
    preds = forward(classifier, Tensor(batch.poisoned32)).data.argmax(axis=1)
    y_adv = target_map(cfg.mode, probe.labels, k, cfg.target)
    mask = eligible_mask(cfg.mode, probe.labels, y_adv)
    if not mask.any():
        return float("nan")
    return asr(preds, y_adv, mask)
