import csv

import numpy as np
import pytest

from respmtl.analysis import (AnalysisError, EmbeddingTable, PerplexityOutOfRange, Projection2D, UnknownEncoder,
                              UnknownLabelField, conditional_probabilities, export_embeddings, kl_divergence, pca2,
                              silhouette_score, tsne_exact, write_scatter)
from respmtl.models import SOFT, EncoderSpec, TaskSet, build_model


def two_clusters(n=200, d=10, seed=0):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, d))
    X[n // 2:] += 8.0
    labels = ["a"] * (n // 2) + ["b"] * (n - n // 2)
    return X, labels


def eig_oracle(X):
    Xc = X - X.mean(axis=0)
    vals, vecs = np.linalg.eigh(np.cov(Xc.T))
    order = np.argsort(vals)[::-1]
    return Xc @ vecs[:, order[:2]], vals[order]


def test_pca_matches_eigendecomposition(rng):
    X = rng.normal(size=(50, 8)) * np.arange(1, 9)
    proj = pca2(X)
    want, vals = eig_oracle(X)
    for k in range(2):
        sign = np.sign(proj.xy[:, k] @ want[:, k])
        np.testing.assert_allclose(proj.xy[:, k], sign * want[:, k], atol=1e-8)
    np.testing.assert_allclose(proj.info["explained_variance_ratio"], vals[:2] / vals.sum(), rtol=1e-10)


def test_pca_sign_convention(rng):
    X = rng.normal(size=(30, 5))
    for a in pca2(X).info["axes"]:
        assert a[np.argmax(np.abs(a))] > 0
    np.testing.assert_array_equal(pca2(X).xy, pca2(X.copy()).xy)


def test_pca_line_is_rank_one(caplog):
    t = np.linspace(-1, 1, 20)
    X = np.outer(t, [1.0, 2.0, -0.5])
    proj = pca2(X)
    assert np.abs(proj.xy[:, 1]).max() == 0.0
    np.testing.assert_allclose(np.abs(proj.xy[:, 0]), np.abs(t) * np.sqrt(5.25), rtol=1e-10)
    assert "rank" in caplog.text


def test_pca_isotropic_ratio():
    d = 10
    X = np.random.default_rng(3).normal(size=(20000, d))
    ratio = pca2(X).info["explained_variance_ratio"]
    _, vals = eig_oracle(X)
    np.testing.assert_allclose(ratio, vals[:2] / vals.sum(), rtol=1e-10)
    assert abs(ratio.sum() - 2 / d) < 0.02


def test_perplexity_calibration(rng):
    X = rng.normal(size=(40, 3))
    P, _ = conditional_probabilities(X, 10.0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    assert not np.diag(P).any()
    H = -np.sum(np.where(P > 0, P * np.log(np.where(P > 0, P, 1)), 0), axis=1)
    np.testing.assert_allclose(np.exp(H), 10.0, rtol=1e-4)


def test_tsne_two_clusters():
    X, labels = two_clusters()
    proj = tsne_exact(X, perplexity=30, iterations=1000, seed=0)
    assert silhouette_score(proj.xy, labels) > 0.8
    kl = proj.info["kl"]
    assert np.all(np.diff(kl[-100:]) <= 1e-9 * kl[-1])


def test_tsne_deterministic_and_equilateral():
    X, _ = two_clusters(60)
    a = tsne_exact(X, 10, 300, seed=4).xy
    np.testing.assert_array_equal(a, tsne_exact(X, 10, 300, seed=4).xy)
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    # three points admit perplexity at most 2 (uniform over the two neighbours)
    Y = tsne_exact(tri, perplexity=2.0, iterations=1000, seed=0).xy
    d = [np.linalg.norm(Y[i] - Y[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
    assert max(d) / min(d) < 1.1


def test_tsne_perplexity_bounds():
    X = np.random.default_rng(0).normal(size=(10, 2))
    with pytest.raises(PerplexityOutOfRange):
        tsne_exact(X, perplexity=10)
    with pytest.raises(PerplexityOutOfRange):
        tsne_exact(X, perplexity=0)


def test_kl_is_zero_for_matching_distributions():
    Y = np.random.default_rng(0).normal(size=(6, 2))
    num = 1 / (1 + ((Y[:, None] - Y[None]) ** 2).sum(-1))
    np.fill_diagonal(num, 0)
    assert abs(kl_divergence(num / num.sum(), Y)) < 1e-12


def test_silhouette_matches_sklearn(rng):
    sklearn_metrics = pytest.importorskip("sklearn.metrics")
    X = rng.normal(size=(60, 4))
    labels = rng.integers(0, 3, 60)
    labels[0] = 5  # singleton cluster scores 0
    assert silhouette_score(X, labels) == pytest.approx(sklearn_metrics.silhouette_score(X, labels), abs=1e-12)
    with pytest.raises(AnalysisError):
        silhouette_score(X, np.zeros(60))


def test_export_embeddings(rng):
    spec = EncoderSpec("mini_transformer", 8, 1, 2, (2, 3), (2, 3), "mean", (4, 6), 2)
    model = build_model(spec, TaskSet(("lung", "disease")), SOFT, seed=0)
    x = rng.normal(size=(100, 4, 6))
    ids = [f"c{i}" for i in range(100)]
    with pytest.raises(UnknownEncoder):
        export_embeddings(model, x, ids)
    with pytest.raises(UnknownEncoder):
        export_embeddings(model, x, ids, encoder="shared")
    a = export_embeddings(model, x, ids, encoder="lung", batch_size=7)
    assert a.vectors.shape == (100, 8)
    np.testing.assert_array_equal(a.vectors, export_embeddings(model, x, ids, encoder="lung").vectors)
    assert not np.array_equal(a.vectors, export_embeddings(model, x, ids, encoder="disease").vectors)


def test_write_scatter(tmp_path):
    lung = ["Normal", "Crackle", "Wheeze", "Both"] * 3
    proj = Projection2D([f"s{i}" for i in range(12)], np.arange(24.0).reshape(12, 2),
                        {"lung": lung, "disease": ["Healthy", "Unhealthy"] * 6})
    assert write_scatter(proj, "lung", tmp_path / "l.csv", tmp_path / "l.svg") == ["Normal", "Crackle", "Wheeze",
                                                                                    "Both"]
    assert len(write_scatter(proj, "disease", tmp_path / "d.csv")) == 2
    rows = list(csv.reader(open(tmp_path / "l.csv")))
    assert rows[0] == ["source_id", "x", "y", "label"] and rows[2] == ["s1", "2.0", "3.0", "Crackle"]
    svg = (tmp_path / "l.svg").read_text()
    assert svg.count("<circle") == 12 + 4 and "Wheeze" in svg
    with pytest.raises(UnknownLabelField):
        write_scatter(proj, "sex", tmp_path / "x.csv")
    empty = Projection2D([], np.zeros((0, 2)), {})
    assert write_scatter(empty, "lung", tmp_path / "e.csv") == []
    assert (tmp_path / "e.csv").read_text() == "source_id,x,y,label\n"


def test_embedding_table_is_accepted_by_projections(rng):
    table = EmbeddingTable(["a", "b", "c", "d"], rng.normal(size=(4, 3)), {"lung": ["Normal"] * 4})
    proj = pca2(table)
    assert proj.source_ids == table.source_ids and proj.labels == table.labels
