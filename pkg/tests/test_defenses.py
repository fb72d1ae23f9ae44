import numpy as np
import pytest

from triggerlab.defenses import (
    ClusterParams,
    DefenseError,
    cluster_purity,
    clustering_defense,
    extract_activations,
    kmeans2,
    prune,
    silhouette_score,
    tsne_embed,
)
from triggerlab.models import ModelSpec, build_model, param_hash


# ---------------------------------------------------------------------------
# t-SNE


def two_blobs(n_per=60, dim=64, sep=20.0, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 1, size=(n_per, dim))
    b = rng.normal(0, 1, size=(n_per, dim))
    b[:, 0] += sep
    return np.concatenate([a, b]), np.array([0] * n_per + [1] * n_per)


def test_tsne_separates_distant_blobs():
    x, truth = two_blobs()
    res = tsne_embed(x, perplexity=20, iterations=300, seed=1)
    emb = res.embedding
    ca, cb = emb[truth == 0].mean(axis=0), emb[truth == 1].mean(axis=0)
    # 1-nearest-centroid rule recovers the blobs almost perfectly
    da = np.linalg.norm(emb - ca, axis=1)
    db = np.linalg.norm(emb - cb, axis=1)
    purity = ((da < db) == (truth == 0)).mean()
    assert purity >= 0.99


def test_tsne_duplicates_nearly_coincide():
    x, _ = two_blobs(n_per=40)
    x[1] = x[0]
    res = tsne_embed(x, perplexity=15, iterations=300, seed=2)
    emb = res.embedding
    dists = np.sqrt(((emb[:, None, :] - emb[None, :, :]) ** 2).sum(axis=2))
    pair = dists[0, 1]
    offdiag = dists[np.triu_indices(len(emb), k=1)]
    assert pair <= np.quantile(offdiag, 0.01)


def test_tsne_deterministic():
    x, _ = two_blobs(n_per=35)
    a = tsne_embed(x, perplexity=10, iterations=120, seed=3).embedding
    b = tsne_embed(x, perplexity=10, iterations=120, seed=3).embedding
    assert np.array_equal(a, b)


def test_tsne_kl_tail_non_increasing():
    x, _ = two_blobs(n_per=40, sep=6.0)
    res = tsne_embed(x, perplexity=12, iterations=200, seed=4)
    tail = res.kl[-20:]
    assert np.all(np.diff(tail) <= 1e-9)


def test_tsne_rejects_small_n():
    x = np.random.default_rng(0).normal(size=(20, 8))
    with pytest.raises(DefenseError, match="perplexity"):
        tsne_embed(x, perplexity=10, iterations=50, seed=0)


# ---------------------------------------------------------------------------
# k-means


def test_kmeans_forced_separation():
    pts = np.array([[0, 0], [0, 1], [10, 10], [10, 11]], dtype=float)
    res = kmeans2(pts, seed=0)
    assert res.assignments[0] == res.assignments[1]
    assert res.assignments[2] == res.assignments[3]
    assert res.assignments[0] != res.assignments[2]


def test_kmeans_wcss_monotone():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(200, 2))
    res = kmeans2(pts, seed=6)
    assert np.all(np.diff(res.wcss_history) <= 1e-9)
    assert res.wcss <= res.wcss_history[0]


def test_kmeans_deterministic():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(50, 2))
    a, b = kmeans2(pts, seed=8), kmeans2(pts, seed=8)
    assert np.array_equal(a.assignments, b.assignments)


def test_kmeans_degenerate_identical_points():
    pts = np.ones((10, 2))
    res = kmeans2(pts, seed=0)
    assert res.degenerate
    assert np.all(res.assignments == 0)


def test_kmeans_needs_two_points():
    with pytest.raises(DefenseError):
        kmeans2(np.ones((1, 2)), seed=0)


def test_purity_invariant_under_relabeling():
    mask = np.array([True] * 6 + [False] * 4)
    a = np.array([1] * 6 + [0] * 4)
    assert cluster_purity(a, mask) == cluster_purity(1 - a, mask) == 1.0
    coin = np.array([0, 1] * 5)
    assert cluster_purity(coin, mask) >= 0.5


def test_silhouette_separated_vs_mixed():
    pts = np.array([[0, 0], [0.1, 0], [5, 5], [5.1, 5]], dtype=float)
    good = silhouette_score(pts, np.array([0, 0, 1, 1]))
    bad = silhouette_score(pts, np.array([0, 1, 0, 1]))
    assert good > 0.8 and bad < 0.0


# ---------------------------------------------------------------------------
# activation extraction


def test_extract_activations_rows_and_flags():
    model = build_model(ModelSpec("har_cnn", 16, 3, n_classes=4), seed=0)
    rng = np.random.default_rng(1)
    w = rng.normal(size=(12, 16, 3)).astype(np.float32)
    prov = ["clean"] * 7 + ["poisoned"] * 5
    acts = extract_activations(model, w, prov)
    assert acts.activations.shape[0] == 12
    assert acts.poisoned_mask.sum() == 5
    dup = extract_activations(model, np.stack([w[0], w[0]]), ["clean", "clean"])
    assert np.array_equal(dup.activations[0], dup.activations[1])


def test_clustering_defense_rejects_empty_group():
    model = build_model(ModelSpec("har_cnn", 16, 3, n_classes=4), seed=0)
    w = np.zeros((5, 16, 3), dtype=np.float32)
    with pytest.raises(DefenseError, match="nonempty"):
        clustering_defense(model, w, w[:0], ClusterParams(perplexity=2, iterations=20))


# ---------------------------------------------------------------------------
# pruning


def make_har(seed=0):
    return build_model(ModelSpec("har_cnn", 16, 3, n_classes=4), seed=seed)


def test_prune_local_definition():
    model = make_har()
    model.params["head.w"].data = np.array(
        [[0.1, -0.5], [0.3, -0.05]], dtype=np.float32).reshape(2, 2)
    # shrink the model to just this tensor for the check
    model.params = {"head.w": model.params["head.w"]}
    out = prune(model, 0.5, scope="local")
    expected = np.array([0.0, -0.5, 0.3, 0.0], dtype=np.float32)
    assert np.array_equal(out.params["head.w"].data.ravel(), expected)


def test_prune_zero_fraction_identity():
    model = make_har(seed=3)
    out = prune(model, 0.0, scope="local")
    assert param_hash(out) == param_hash(model)


def test_prune_global_crosses_tensors():
    model = make_har()
    model.params = {
        "a.w": model.params["conv1.w"],
        "b.w": model.params["conv2.w"],
    }
    model.params["a.w"].data = np.array([[[[1.0]]]], dtype=np.float32)
    model.params["b.w"].data = np.array([[[[0.01, 0.02, 0.03]]]], dtype=np.float32)
    out = prune(model, 0.5, scope="global")
    # 4 weights total -> 2 zeroed, both from the small-magnitude tensor
    assert out.params["a.w"].data.ravel().tolist() == [1.0]
    expected = np.array([0.0, 0.0, 0.03], dtype=np.float32)
    assert np.array_equal(out.params["b.w"].data.ravel(), expected)


def test_prune_fraction_reached_and_shapes_kept():
    model = make_har(seed=4)
    for scope in ("local", "global"):
        out = prune(model, 0.5, scope=scope)
        for name, p in out.params.items():
            assert p.data.shape == model.params[name].data.shape
        weights = [n for n in out.params if n.endswith(".w")]
        total = sum(out.params[n].data.size for n in weights)
        zeros = sum(int((out.params[n].data == 0).sum()) for n in weights)
        assert zeros / total >= 0.5 - 1e-9
        biases_touched = any(
            not np.array_equal(out.params[n].data, model.params[n].data)
            for n in out.params if n.endswith(".b"))
        assert not biases_touched


def test_prune_leaves_original_untouched():
    model = make_har(seed=5)
    before = param_hash(model)
    prune(model, 0.7, scope="global")
    assert param_hash(model) == before


def test_prune_validates():
    model = make_har()
    with pytest.raises(DefenseError):
        prune(model, 1.0)
    with pytest.raises(DefenseError):
        prune(model, 0.5, scope="half")
