import csv

import numpy as np
import numpy.testing as npt
import pytest

from regrow.cluster import (
    ClusterAssignment,
    FireFeature,
    assign_clusters,
    build_features,
    export_geo,
    kmeans,
    minmax_normalize,
    precip_mean_first_steps,
)
from regrow.raster import FireRecord, RasterStack


def blobs(n_per, centers, spread=0.03, seed=0):
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for i, c in enumerate(centers):
        pts.append(np.asarray(c) + spread * rng.normal(size=(n_per, len(c))))
        labels += [i] * n_per
    return np.vstack(pts), np.array(labels)


def agreement(a, b):
    """Exact partition agreement up to label renaming."""
    mapping = {}
    for x, y in zip(a, b):
        if x in mapping and mapping[x] != y:
            return False
        mapping[x] = y
    return len(set(mapping.values())) == len(mapping)


# features ---------------------------------------------------------------------

def catalog3():
    return [
        FireRecord("F1", "A", -120.0, 37.0, "2017-05", 5000),
        FireRecord("F2", "B", -118.0, 34.0, "2018-08", 8000),
        FireRecord("F3", "C", -122.0, 40.0, "2019-10", 12000),
    ]


def test_build_features_joins_sources():
    recov = {"F1": (0.2, 1.0), "F2": (-0.4, 0.8)}
    precip = {"F1": 2.0, "F2": 3.5}
    feats = build_features(recov, catalog3(), precip)
    assert [f.fire_id for f in feats] == ["F1", "F2"]
    assert feats[0].precip == 2.0
    assert feats[1].k_hat == -0.4


def test_build_features_missing_source():
    with pytest.raises(KeyError, match="F9"):
        build_features({"F9": (0.1, 1.0)}, catalog3(), {"F9": 1.0})
    with pytest.raises(KeyError, match="precipitation"):
        build_features({"F1": (0.1, 1.0)}, catalog3(), {})


def test_precip_mean_matches_loop():
    rng = np.random.default_rng(0)
    data = rng.random((8, 4, 4, 1)).astype(np.float32)
    stack = RasterStack(("PRECIP",), data, np.zeros(data.shape, bool))
    total = 0.0
    for t in range(5):
        for r in range(4):
            for c in range(4):
                total += float(data[t, r, c, 0])
    assert precip_mean_first_steps(stack) == pytest.approx(total / (5 * 16))


def test_constant_precip():
    data = np.full((6, 3, 3, 1), 2.0, np.float32)
    stack = RasterStack(("PRECIP",), data, np.zeros(data.shape, bool))
    assert precip_mean_first_steps(stack) == 2.0


# normalization -----------------------------------------------------------------

def test_minmax_two_points():
    feats = [
        FireFeature("a", 0.0, 10.0, -1.0, 0.5, 2.0),
        FireFeature("b", 1.0, 20.0, 1.0, 1.5, 4.0),
    ]
    norm, transforms = minmax_normalize(feats)
    npt.assert_allclose(norm[0], 0.0)
    npt.assert_allclose(norm[1], 1.0)


def test_minmax_constant_dimension():
    feats = [
        FireFeature("a", 5.0, 10.0, -1.0, 0.5, 2.0),
        FireFeature("b", 5.0, 20.0, 1.0, 1.5, 4.0),
    ]
    norm, _ = minmax_normalize(feats)
    npt.assert_allclose(norm[:, 0], 0.5)


def test_minmax_round_trip():
    from regrow.cluster import denormalize

    rng = np.random.default_rng(1)
    feats = [
        FireFeature(f"f{i}", *rng.uniform(-5, 5, size=5)) for i in range(6)
    ]
    norm, transforms = minmax_normalize(feats)
    raw = np.stack([f.vector() for f in feats])
    npt.assert_allclose(denormalize(norm, transforms), raw, atol=1e-12)


def test_minmax_needs_two_points():
    with pytest.raises(ValueError):
        minmax_normalize([FireFeature("a", 0, 0, 0, 0, 0)])


# kmeans ---------------------------------------------------------------------------

def test_kmeans_recovers_blobs():
    pts, truth = blobs(20, [(0, 0), (5, 5), (-5, 5)], seed=2)
    labels, centers, sse = kmeans(pts, 3, seed=0)
    assert agreement(labels, truth)


def test_kmeans_n_equals_k():
    pts = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0]])
    labels, centers, sse = kmeans(pts, 4, seed=1)
    assert len(set(labels.tolist())) == 4
    assert sse == pytest.approx(0.0)


def test_kmeans_too_few_points():
    with pytest.raises(ValueError):
        kmeans(np.zeros((2, 2)), 3)


def test_kmeans_deterministic():
    pts, _ = blobs(15, [(0, 0), (4, 4)], seed=3)
    a = kmeans(pts, 2, seed=5)
    b = kmeans(pts, 2, seed=5)
    npt.assert_array_equal(a[0], b[0])
    assert a[2] == b[2]


def test_kmeans_duplicates_share_label():
    pts = np.array([[1.0, 1.0]] * 4 + [[8.0, 8.0]] * 4 + [[1.0, 8.0]] * 3)
    labels, _, _ = kmeans(pts, 3, seed=0)
    assert len(set(labels[:4].tolist())) == 1
    assert len(set(labels[4:8].tolist())) == 1
    assert len(set(labels[8:].tolist())) == 1


def test_kmeans_permutation_invariant_partition():
    pts, _ = blobs(12, [(0, 0), (6, 0), (3, 6)], seed=4)
    rng = np.random.default_rng(5)
    perm = rng.permutation(len(pts))
    l1, _, s1 = kmeans(pts, 3, seed=7)
    l2, _, s2 = kmeans(pts[perm], 3, seed=7)
    assert s1 == pytest.approx(s2)
    assert agreement(l1[perm], l2)


def test_kmeans_best_of_restarts():
    pts, _ = blobs(10, [(0, 0), (7, 0), (0, 7), (7, 7)], seed=6)
    _, _, best_sse = kmeans(pts, 4, seed=0, n_restarts=10)
    for r in range(5):
        # each single-restart solution can only be as good or worse
        _, _, sse = kmeans(pts, 4, seed=r, n_restarts=1)
        assert best_sse <= sse + 1e-9


def test_assign_clusters_mean_abs_k():
    pts, truth = blobs(10, [(0, 0), (9, 9)], seed=8)
    k_hat = np.where(truth == 0, 0.1, -0.4)
    asg = assign_clusters([f"f{i}" for i in range(len(pts))], pts, k_hat, counts=(2,), seed=0)
    lab = asg.labels[2]
    means = sorted(asg.cluster_mean_abs_k[2].tolist())
    npt.assert_allclose(means, [0.1, 0.4], atol=1e-12)


# export ------------------------------------------------------------------------------

def test_export_geo_round_trip(tmp_path):
    feats = [
        FireFeature("F1", -120.0, 37.0, 0.1, 1.0, 2.0),
        FireFeature("F2", -118.0, 34.0, -0.4, 0.8, 3.0),
        FireFeature("F3", -122.0, 40.0, 0.3, 1.1, 1.0),
    ]
    assignment = ClusterAssignment(
        fire_ids=[f.fire_id for f in feats],
        labels={3: np.array([0, 1, 2]), 5: np.array([0, 1, 1])},
        cluster_mean_abs_k={3: np.array([0.1, 0.4, 0.3]), 5: np.array([0.1, 0.35, 0, 0, 0])},
    )
    csv_path = tmp_path / "clusters.csv"
    export_geo(feats, assignment, csv_path, svg_dir=str(tmp_path))
    with open(csv_path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["fire_id"] for r in rows] == ["F1", "F2", "F3"]
    assert [r["label_k3"] for r in rows] == ["0", "1", "2"]
    assert [r["label_k5"] for r in rows] == ["0", "1", "1"]
    assert (tmp_path / "map_k3.svg").exists()
    assert (tmp_path / "map_k5.svg").exists()


def test_svg_radius_proportional(tmp_path):
    feats = [
        FireFeature("F1", -120.0, 37.0, 0.1, 1.0, 2.0),
        FireFeature("F2", -118.0, 34.0, -0.4, 0.8, 3.0),
    ]
    from regrow.cluster import write_map_svg

    path = tmp_path / "map.svg"
    write_map_svg(feats, np.array([0, 1]), np.array([0.1, 0.4]), path)
    text = path.read_text()
    radii = [float(part.split('"')[1]) for part in text.split(" r=")[1:]]
    base = 2.0
    assert (radii[0] - base) / (radii[1] - base) == pytest.approx(0.25)
