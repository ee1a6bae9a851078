"""Fire feature assembly, min-max normalization, k-means clustering, and the
map-ready CSV/SVG exports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .raster import FireRecord

CLUSTER_COUNTS = (3, 5, 10)

FEATURE_NAMES = ("lon", "lat", "k_hat", "L_hat", "precip")


@dataclass
class FireFeature:
    fire_id: str
    lon: float
    lat: float
    k_hat: float
    L_hat: float
    precip: float

    def vector(self) -> np.ndarray:
        return np.array([self.lon, self.lat, self.k_hat, self.L_hat, self.precip])


@dataclass
class ClusterAssignment:
    fire_ids: list[str]
    labels: dict[int, np.ndarray]            # n_clusters -> per-fire label
    cluster_mean_abs_k: dict[int, np.ndarray]  # n_clusters -> per-cluster mean |k|
    sse: dict[int, float] = field(default_factory=dict)


def build_features(recoveries, catalog, precip_means) -> list[FireFeature]:
    """Join predicted (k, L) with catalog coordinates and early-window precip.

    ``recoveries`` maps fire id -> (k_hat, L_hat); ``precip_means`` maps fire
    id -> mean precipitation over the first 5 steps. A fire missing from any
    source is an error naming the fire.
    """
    by_id: dict[str, FireRecord] = {r.id: r for r in catalog}
    out = []
    for fid in sorted(recoveries):
        if fid not in by_id:
            raise KeyError(f"fire {fid} missing from the catalog")
        if fid not in precip_means:
            raise KeyError(f"fire {fid} has no precipitation source")
        rec = by_id[fid]
        k_hat, L_hat = recoveries[fid]
        feat = FireFeature(fid, rec.lon, rec.lat, float(k_hat), float(L_hat), float(precip_means[fid]))
        v = feat.vector()
        if not np.isfinite(v).all():
            raise ValueError(f"fire {fid} has non-finite features: {v}")
        out.append(feat)
    return out


def precip_mean_first_steps(stack, n_steps: int = 5) -> float:
    """Mean PRECIP over the first ``n_steps`` frames and all pixels."""
    return float(stack.channel("PRECIP")[:n_steps].mean())


def minmax_normalize(features: list[FireFeature]):
    """Map every feature dimension to [0, 1]; a constant dimension maps to 0.5.

    Returns (normalized (n, 5) array, transforms) where transforms is a list
    of (lo, hi) per dimension for round-tripping.
    """
    if len(features) < 2:
        raise ValueError("need at least 2 features to normalize")
    raw = np.stack([f.vector() for f in features])
    lo = raw.min(axis=0)
    hi = raw.max(axis=0)
    span = hi - lo
    out = np.empty_like(raw)
    for j in range(raw.shape[1]):
        if span[j] == 0:
            out[:, j] = 0.5
        else:
            out[:, j] = (raw[:, j] - lo[j]) / span[j]
    return out, list(zip(lo.tolist(), hi.tolist()))


def denormalize(norm: np.ndarray, transforms) -> np.ndarray:
    out = np.empty_like(norm, dtype=float)
    for j, (lo, hi) in enumerate(transforms):
        out[:, j] = norm[:, j] * (hi - lo) + lo if hi > lo else lo
    return out


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center; pick lowest index
            # not yet chosen for determinism
            chosen = {tuple(c) for c in centers[:j]}
            idx = next((i for i in range(n) if tuple(points[i]) not in chosen), 0)
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, n - 1)
        centers[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int):
    n, k = points.shape[0], centers.shape[0]
    labels = np.full(n, -1)
    for _ in range(max_iter):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)       # ties take the lowest index
        for j in range(k):
            members = new_labels == j
            if not members.any():
                # repopulate an emptied cluster with the point farthest from
                # its current center (lowest index on ties)
                far = np.argmax(d2[np.arange(n), new_labels])
                new_labels[far] = j
                members = new_labels == j
            centers[j] = points[members].mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    sse = float(d2[np.arange(n), labels].sum())
    return labels, centers, sse


def kmeans(points: np.ndarray, n_clusters: int, seed: int = 0, n_restarts: int = 10, max_iter: int = 300):
    """Seeded k-means++ with Lloyd iterations; best of ``n_restarts`` by SSE.

    Returns (labels, centers, sse).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n < n_clusters:
        raise ValueError(f"{n} points cannot form {n_clusters} clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_restarts):
        centers = _kmeans_pp_seed(pts, n_clusters, rng)
        labels, centers, sse = _lloyd(pts, centers.copy(), max_iter)
        if best is None or sse < best[2]:
            best = (labels, centers, sse)
    return best


def assign_clusters(
    fire_ids: list[str],
    norm_points: np.ndarray,
    k_hat: np.ndarray,
    counts=CLUSTER_COUNTS,
    seed: int = 0,
) -> ClusterAssignment:
    """k-means at each requested cluster count plus per-cluster mean |k|."""
    labels = {}
    mean_abs = {}
    sse = {}
    for k in counts:
        lab, _, s = kmeans(norm_points, k, seed=seed)
        labels[k] = lab
        sse[k] = s
        mean_abs[k] = np.array(
            [np.abs(k_hat[lab == j]).mean() if (lab == j).any() else 0.0 for j in range(k)]
        )
    return ClusterAssignment(list(fire_ids), labels, mean_abs, sse)


# ---------------------------------------------------------------------------
# exports

_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def export_geo(features: list[FireFeature], assignment: ClusterAssignment, csv_path, svg_dir=None):
    """Write the per-fire cluster CSV and one SVG map per cluster count."""
    counts = sorted(assignment.labels)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["fire_id", "lon", "lat", "k_hat", "L_hat", "p"]
            + [f"label_k{k}" for k in counts]
        )
        for i, feat in enumerate(features):
            writer.writerow(
                [
                    feat.fire_id,
                    f"{feat.lon:.6f}",
                    f"{feat.lat:.6f}",
                    f"{feat.k_hat:.6f}",
                    f"{feat.L_hat:.6f}",
                    f"{feat.precip:.6f}",
                ]
                + [str(int(assignment.labels[k][i])) for k in counts]
            )
    if svg_dir is None:
        return
    for k in counts:
        path = f"{svg_dir}/map_k{k}.svg"
        write_map_svg(features, assignment.labels[k], assignment.cluster_mean_abs_k[k], path)


def write_map_svg(features, labels, cluster_mean_abs_k, path, size: int = 480):
    """Equirectangular lon/lat scatter; marker radius tracks cluster mean |k|."""
    lons = np.array([f.lon for f in features])
    lats = np.array([f.lat for f in features])
    pad = 0.05
    lo_x, hi_x = lons.min(), lons.max()
    lo_y, hi_y = lats.min(), lats.max()
    span_x = (hi_x - lo_x) or 1.0
    span_y = (hi_y - lo_y) or 1.0
    peak = cluster_mean_abs_k.max() or 1.0
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white" stroke="black"/>',
    ]
    for i, feat in enumerate(features):
        x = (pad + (1 - 2 * pad) * (feat.lon - lo_x) / span_x) * size
        y = (1 - pad - (1 - 2 * pad) * (feat.lat - lo_y) / span_y) * size
        lab = int(labels[i])
        r = 2.0 + 10.0 * cluster_mean_abs_k[lab] / peak
        color = _PALETTE[lab % len(_PALETTE)]
        lines.append(
            f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.2f}" fill="{color}" '
            f'fill-opacity="0.8"><title>{feat.fire_id}</title></circle>'
        )
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
