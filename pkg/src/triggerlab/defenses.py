"""Backdoor defenses: activation clustering, magnitude pruning, and
adversarial (re)training with generator rearming.

Activation clustering embeds last-hidden-layer activations of windows
predicted as the inspected class with an exact t-SNE, splits them with
seeded 2-means, and scores how well the two clusters separate clean rows
from poisoned rows. Purity >= the detection threshold counts as a
detection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .datasets import LabeledDataset
from .models import ModelState, TrainingLog, freeze, generate_trigger, hidden_features, iterate_batches


class DefenseError(ValueError):
    """Invalid defense parameters or inputs."""


@dataclass
class ActivationSet:
    activations: np.ndarray          # (n, h)
    provenance: np.ndarray           # (n,) strings 'clean' / 'poisoned'
    predicted: np.ndarray            # (n,) predicted labels

    def __post_init__(self):
        if len(self.activations) != len(self.provenance) or len(self.activations) != len(self.predicted):
            raise DefenseError("activation rows, provenance, and predictions must align")

    @property
    def poisoned_mask(self) -> np.ndarray:
        return self.provenance == "poisoned"


def extract_activations(classifier: ModelState, windows: np.ndarray,
                        provenance) -> ActivationSet:
    """Last-hidden-layer activations in evaluation mode, one row per window."""
    provenance = np.asarray(provenance, dtype="<U8")
    if len(windows) != len(provenance):
        raise DefenseError(f"{len(windows)} windows but {len(provenance)} provenance tags")
    acts, preds = [], []
    for start in range(0, len(windows), 256):
        chunk = windows[start:start + 256]
        acts.append(hidden_features(classifier, chunk))
        from .models import classify
        preds.append(classify(classifier, chunk).argmax(axis=1))
    return ActivationSet(np.concatenate(acts), provenance,
                         np.concatenate(preds).astype(np.int32))


# ---------------------------------------------------------------------------
# exact t-SNE


@dataclass
class TsneResult:
    embedding: np.ndarray   # (n, 2)
    kl: np.ndarray          # per-iteration KL divergence


def _perplexity_affinities(dist_sq: np.ndarray, perplexity: float) -> np.ndarray:
    """Per-point Gaussian conditionals with bandwidth binary-searched to the
    target perplexity (entropy matching, 50 bisection steps)."""
    n = dist_sq.shape[0]
    target = np.log(perplexity)
    p = np.zeros_like(dist_sq)
    for i in range(n):
        d = np.delete(dist_sq[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(50):
            w = np.exp(-d * beta)
            s = w.sum()
            if s <= 0:
                h = 0.0
                probs = np.zeros_like(w)
            else:
                probs = w / s
                h = -(probs * np.log(np.maximum(probs, 1e-300))).sum()
            if abs(h - target) < 1e-5:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        row = np.insert(probs, i, 0.0)
        p[i] = row
    return p


def _kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))).sum())


def tsne_embed(activations: np.ndarray, perplexity: float = 30.0,
               iterations: int = 500, seed: int = 0,
               learning_rate: float = 200.0) -> TsneResult:
    """Exact (all-pairs) t-SNE to 2 dimensions with a fixed seed.

    Gradient descent uses momentum and per-coordinate gains; over the last
    10% of iterations steps are backtracked whenever they would increase
    the KL divergence, so the tail of the curve is non-increasing.
    """
    x = np.asarray(activations, dtype=np.float64)
    n, h = x.shape
    if h < 2:
        raise DefenseError(f"tsne: need at least 2 feature dims, got {h}")
    if n <= 3 * perplexity:
        raise DefenseError(f"tsne: need more than {int(3 * perplexity)} rows for "
                           f"perplexity {perplexity}, got {n}")

    sq = (x * x).sum(axis=1)
    dist_sq = np.maximum(sq[:, None] + sq[None, :] - 2 * (x @ x.T), 0.0)
    p_cond = _perplexity_affinities(dist_sq, perplexity)
    p = (p_cond + p_cond.T) / (2 * n)
    p = np.maximum(p, 1e-12)

    rng = np.random.default_rng([seed, 61])
    y = rng.normal(0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    exaggeration_until = max(1, iterations // 5)
    guard_from = iterations - max(1, iterations // 10)
    kl_curve = np.zeros(iterations)
    lr = learning_rate

    def q_of(y_):
        dy = (y_ * y_).sum(axis=1)
        w = 1.0 / (1.0 + np.maximum(dy[:, None] + dy[None, :] - 2 * (y_ @ y_.T), 0.0))
        np.fill_diagonal(w, 0.0)
        return w / w.sum(), w

    for it in range(iterations):
        p_eff = p * 4.0 if it < exaggeration_until else p
        q, w = q_of(y)
        grad = np.zeros_like(y)
        pq = (p_eff - q) * w
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)

        momentum = 0.5 if it < exaggeration_until else 0.8
        flip = np.sign(grad) != np.sign(velocity)
        gains = np.where(flip, gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        step = momentum * velocity - lr * gains * grad

        if it >= guard_from:
            # keep the KL tail monotone: shrink any step that would raise it
            q_now, _ = q_of(y)
            kl_now = _kl_divergence(p, q_now)
            trial = step
            for _ in range(12):
                q_try, _ = q_of(y + trial)
                if _kl_divergence(p, q_try) <= kl_now + 1e-12:
                    break
                trial = trial * 0.5
                velocity = velocity * 0.0
            else:
                trial = np.zeros_like(step)
            step = trial
        velocity = step
        y = y + step
        y = y - y.mean(axis=0)
        q, _ = q_of(y)
        kl_curve[it] = _kl_divergence(p, q)
    return TsneResult(embedding=y, kl=kl_curve)


# ---------------------------------------------------------------------------
# seeded 2-means


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    wcss: float
    wcss_history: list
    degenerate: bool = False


def kmeans2(points: np.ndarray, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm for two clusters with seeded ++-style init.

    Runs until the assignment fixpoint or max_iter; within-cluster sum of
    squares is non-increasing per iteration. All-identical inputs are
    flagged degenerate and land in a single cluster.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 2:
        raise DefenseError("kmeans2: need at least 2 points")
    if np.allclose(pts, pts[0]):
        return KMeansResult(np.zeros(n, dtype=np.int32), np.stack([pts[0], pts[0]]),
                            0.0, [0.0], degenerate=True)
    rng = np.random.default_rng([seed, 62])
    first = int(rng.integers(n))
    d2 = ((pts - pts[first]) ** 2).sum(axis=1)
    probs = d2 / d2.sum()
    second = int(rng.choice(n, p=probs))
    centers = np.stack([pts[first], pts[second]])

    assign = np.full(n, -1, dtype=np.int32)
    history = []
    for _ in range(max_iter):
        d = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d.argmin(axis=1).astype(np.int32)
        for c in range(2):  # re-seed an emptied cluster with the farthest point
            if not (new_assign == c).any():
                far = d.min(axis=1).argmax()
                new_assign[far] = c
        history.append(float(d[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(2):
            centers[c] = pts[assign == c].mean(axis=0)
    wcss = float(((pts - centers[assign]) ** 2).sum())
    return KMeansResult(assign, centers, wcss, history)


def silhouette_score(points: np.ndarray, assignments: np.ndarray) -> float:
    """Mean silhouette over points; singleton clusters contribute 0."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    d = np.sqrt(np.maximum(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2), 0.0))
    scores = np.zeros(n)
    for i in range(n):
        same = assignments == assignments[i]
        other = ~same
        if same.sum() <= 1 or not other.any():
            continue
        a = d[i, same].sum() / (same.sum() - 1)
        b = d[i, other].mean()
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


# ---------------------------------------------------------------------------
# activation-clustering defense


@dataclass
class ClusterParams:
    perplexity: float = 30.0
    iterations: int = 500
    learning_rate: float = 200.0
    seed: int = 0
    detection_threshold: float = 0.9


@dataclass
class ClusterVerdict:
    embedding: np.ndarray
    assignments: np.ndarray
    provenance: np.ndarray
    purity: float
    silhouette: float
    detected: bool


def cluster_purity(assignments: np.ndarray, poisoned_mask: np.ndarray) -> float:
    """Best provenance agreement over the two cluster labelings; >= 0.5."""
    match = float((assignments == poisoned_mask.astype(np.int32)).mean())
    return max(match, 1.0 - match)


def clustering_defense(classifier: ModelState, clean_target_windows: np.ndarray,
                       poisoned_windows: np.ndarray,
                       params: ClusterParams | None = None) -> ClusterVerdict:
    """Embed + cluster activations of windows the classifier assigns to the
    inspected class; report how cleanly the split recovers provenance."""
    params = params or ClusterParams()
    if len(clean_target_windows) == 0 or len(poisoned_windows) == 0:
        raise DefenseError("clustering_defense: both groups must be nonempty")
    windows = np.concatenate([clean_target_windows, poisoned_windows])
    provenance = np.array(["clean"] * len(clean_target_windows)
                          + ["poisoned"] * len(poisoned_windows))
    acts = extract_activations(classifier, windows, provenance)
    emb = tsne_embed(acts.activations, perplexity=params.perplexity,
                     iterations=params.iterations, seed=params.seed,
                     learning_rate=params.learning_rate)
    km = kmeans2(emb.embedding, seed=params.seed)
    purity = cluster_purity(km.assignments, acts.poisoned_mask)
    sil = silhouette_score(emb.embedding, km.assignments)
    return ClusterVerdict(embedding=emb.embedding, assignments=km.assignments,
                          provenance=provenance, purity=purity, silhouette=sil,
                          detected=purity >= params.detection_threshold)


# ---------------------------------------------------------------------------
# magnitude pruning


def prune(model: ModelState, fraction: float, scope: str = "local") -> ModelState:
    """Zero the `fraction` smallest-magnitude weights, per tensor (local)
    or across all weight tensors (global). Biases are untouched and
    shapes never change."""
    if not 0 <= fraction < 1:
        raise DefenseError(f"prune: fraction {fraction} outside [0, 1)")
    if scope not in ("local", "global"):
        raise DefenseError(f"prune: unknown scope '{scope}'")
    out = model.copy()
    weight_names = [n for n in out.params if n.endswith(".w") or n.endswith(".w_ih")
                    or n.endswith(".w_hh")]
    if fraction == 0:
        return out
    if scope == "local":
        for name in weight_names:
            w = out.params[name].data
            k = int(np.floor(fraction * w.size))
            if k == 0:
                continue
            flat = np.abs(w).ravel()
            order = np.argsort(flat, kind="stable")
            w.ravel()[order[:k]] = 0.0
    else:
        sizes = [out.params[n].data.size for n in weight_names]
        all_mags = np.concatenate([np.abs(out.params[n].data).ravel() for n in weight_names])
        k = int(np.floor(fraction * all_mags.size))
        if k:
            order = np.argsort(all_mags, kind="stable")[:k]
            kill = np.zeros(all_mags.size, dtype=bool)
            kill[order] = True
            pos = 0
            for name, size in zip(weight_names, sizes):
                mask = kill[pos:pos + size].reshape(out.params[name].data.shape)
                out.params[name].data[mask] = 0.0
                pos += size
    out.meta["pruned"] = {"fraction": fraction, "scope": scope}
    return out


# ---------------------------------------------------------------------------
# adversarial training and rearming


def adversarial_train(classifier: ModelState, gen: ModelState, clean_data: LabeledDataset,
                      epochs: int, mix_ratio: float = 0.5, batch_size: int = 32,
                      lr: float = 1e-3, seed: int = 0) -> tuple[ModelState, TrainingLog]:
    """Fine-tune a copy of the classifier on batches mixing clean windows
    with generator-poisoned windows labeled with their TRUE classes.

    The generator is only ever called through generate_trigger; its
    internals are never read.
    """
    if not 0 < mix_ratio < 1:
        raise DefenseError(f"adversarial_train: mix_ratio {mix_ratio} outside (0, 1)")
    freeze(gen)
    from .autodiff import Adam, backward, cross_entropy
    from .models import _ensure_batch, forward

    hardened = classifier.copy().set_trainable(True)
    opt = Adam(hardened.parameters(), lr=lr)
    shuffle_rng = np.random.default_rng([seed, 71])
    pick_rng = np.random.default_rng([seed, 72])
    drop_rng = np.random.default_rng([seed, 73])
    log = TrainingLog()
    paired = clean_data.paired
    for _ in range(epochs):
        total, correct = 0.0, 0
        for idx in iterate_batches(len(clean_data), batch_size, shuffle_rng):
            x = np.array(clean_data.windows[idx])
            y = clean_data.labels[idx]
            n_poison = int(round(mix_ratio * len(idx)))
            if n_poison:
                which = pick_rng.choice(len(idx), size=n_poison, replace=False)
                if paired:
                    x[which, 1] += generate_trigger(gen, x[which, 1])
                else:
                    x[which] += generate_trigger(gen, x[which])
            logits = forward(hardened, Tensor(_ensure_batch(hardened.spec, x)),
                             training=True, rng=drop_rng)
            loss = cross_entropy(logits, y)
            backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        log.losses.append(total / len(clean_data))
        log.accuracies.append(correct / len(clean_data))
    hardened.meta["adversarially_trained"] = {"epochs": epochs, "mix_ratio": mix_ratio}
    return hardened, log


def rearm(hardened_classifier: ModelState, fresh_gen: ModelState,
          gen_train_data: LabeledDataset, test_data: LabeledDataset, cfg,
          config_hash: str = ""):
    """Retrain a fresh generator against the hardened (frozen) classifier
    and report its attack metrics on the test split."""
    from .attacks import apply_trigger, target_map, train_generator
    from .metrics import AttackReport, asr, confusion, eligible_mask, mae, mape
    from .models import accuracy, classify

    freeze(hardened_classifier)
    before = param_hash_of(hardened_classifier)
    fresh_gen, log = train_generator(fresh_gen, hardened_classifier, gen_train_data, cfg)
    assert param_hash_of(hardened_classifier) == before

    batch = apply_trigger(fresh_gen, test_data.windows)
    preds = classify(hardened_classifier, batch.poisoned).argmax(axis=1)
    clean_preds = classify(hardened_classifier, test_data.windows).argmax(axis=1)
    k = hardened_classifier.spec.n_classes
    y_adv = target_map(cfg.mode, test_data.labels, k, cfg.target)
    mask = eligible_mask(cfg.mode, test_data.labels, y_adv)
    report = AttackReport(
        mode=cfg.mode, target=cfg.target,
        asr=asr(preds, y_adv, mask),
        mae=mae(batch.clean, batch.poisoned),
        mape=mape(batch.clean, batch.poisoned),
        clean_accuracy=accuracy(hardened_classifier, test_data),
        confusion_clean=confusion(clean_preds, test_data.labels, k),
        confusion_poisoned=confusion(preds, test_data.labels, k),
        config_hash=config_hash, seed=cfg.seed,
        extra={"stage": "rearmed"},
    )
    return fresh_gen, report


def param_hash_of(state: ModelState) -> str:
    from .models import param_hash
    return param_hash(state)
