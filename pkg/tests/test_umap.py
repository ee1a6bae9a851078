import numpy as np
import numpy.testing as npt
import pytest

from regrow.umap2d import (
    curve_params,
    fit_curve_params,
    fuzzy_graph,
    knn_graph,
    smooth_knn_sigma,
    spectral_init,
    trustworthiness,
    umap_embed,
)


def blobs(n_per, centers, spread=0.05, seed=0, dim=5):
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for i, c in enumerate(centers):
        center = np.zeros(dim)
        center[: len(c)] = c
        pts.append(center + spread * rng.normal(size=(n_per, dim)))
        labels += [i] * n_per
    return np.vstack(pts), np.array(labels)


def test_curve_params_frozen_value_matches_fit():
    a, b = fit_curve_params(0.1)
    ca, cb = curve_params(0.1)
    assert ca == pytest.approx(a, rel=1e-6)
    assert cb == pytest.approx(b, rel=1e-6)
    # the fitted curve actually tracks the target
    d = np.linspace(0.01, 3, 100)
    target = np.where(d < 0.1, 1.0, np.exp(-(d - 0.1)))
    phi = 1.0 / (1.0 + a * d ** (2 * b))
    assert np.abs(phi - target).max() < 0.08


def test_knn_graph_exact():
    pts = np.array([[0.0], [1.0], [3.0], [7.0]])
    idx, dist = knn_graph(pts, 2)
    npt.assert_array_equal(idx[0], [1, 2])
    npt.assert_allclose(dist[0], [1.0, 3.0])
    npt.assert_array_equal(idx[2], [1, 0])


def test_sigma_bisection_hits_target():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(60, 5))
    idx, dist = knn_graph(pts, 15)
    target = np.log2(15)
    for i in range(pts.shape[0]):
        rho, sigma = smooth_knn_sigma(dist[i], target)
        total = np.exp(-np.maximum(dist[i] - rho, 0.0) / sigma).sum()
        assert abs(total - target) < 1e-5


def test_fuzzy_graph_symmetric():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(40, 5))
    sym, _, _ = fuzzy_graph(pts, 10)
    npt.assert_allclose(sym, sym.T, atol=1e-12)
    assert sym.max() <= 1.0 + 1e-12
    assert sym.min() >= 0.0


def test_spectral_init_deterministic():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(30, 5))
    sym, _, _ = fuzzy_graph(pts, 8)
    a = spectral_init(sym, seed=0)
    b = spectral_init(sym, seed=0)
    npt.assert_array_equal(a, b)
    assert np.abs(a).max() == pytest.approx(10.0)


def test_equilateral_triangle_no_collapse():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    emb = umap_embed(pts, n_neighbors=2, epochs=100, seed=0)
    d = [
        np.linalg.norm(emb.coords[i] - emb.coords[j])
        for i, j in ((0, 1), (0, 2), (1, 2))
    ]
    assert max(d) / min(d) < 2.0
    assert min(d) > 1e-3


def test_two_blobs_separate():
    pts, labels = blobs(30, [(0.0, 0.0), (1.0, 1.0)], seed=4)
    emb = umap_embed(pts, n_neighbors=10, epochs=200, seed=1)
    coords = emb.coords
    # leave-one-out 1-NN on the embedding must recover the blob label
    correct = 0
    for i in range(len(labels)):
        d = np.linalg.norm(coords - coords[i], axis=1)
        d[i] = np.inf
        correct += labels[int(np.argmin(d))] == labels[i]
    assert correct == len(labels)


def test_embed_deterministic():
    pts, _ = blobs(15, [(0, 0), (1, 1)], seed=5)
    a = umap_embed(pts, epochs=60, seed=7).coords
    b = umap_embed(pts, epochs=60, seed=7).coords
    npt.assert_array_equal(a, b)
    c = umap_embed(pts, epochs=60, seed=8).coords
    assert not np.array_equal(a, c)


def test_embed_validates_input():
    with pytest.raises(ValueError, match="3 points"):
        umap_embed(np.zeros((2, 5)))
    with pytest.raises(ValueError, match="2-D"):
        umap_embed(np.zeros(5))


def test_trustworthiness_identity_is_one():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(50, 2))
    assert trustworthiness(pts, pts.copy(), k=10) == pytest.approx(1.0)


def test_blob_benchmark_trustworthiness():
    pts, _ = blobs(34, [(0, 0), (1.2, 0), (0.6, 1.2)], spread=0.08, seed=9)
    pts = pts[:100]
    emb = umap_embed(pts, n_neighbors=15, min_dist=0.1, epochs=500, seed=3)
    tw = trustworthiness(pts, emb.coords, k=10)
    assert tw >= 0.80, tw
