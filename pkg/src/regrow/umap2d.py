"""Self-contained 2-D UMAP: exact kNN graph, fuzzy memberships with bisected
bandwidths, spectral initialization, and single-threaded SGD layout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMOOTH_TOL = 1e-5
SMOOTH_MAX_ITER = 64
NEG_SAMPLE_RATE = 5
MOVE_CLIP = 4.0

# least-squares fit of 1/(1 + a d^(2b)) to the min_dist membership target,
# frozen for the default min_dist (see fit_curve_params)
_CURVE_CACHE: dict[float, tuple[float, float]] = {0.1: (1.576943613460891, 0.895060719320876)}


def fit_curve_params(min_dist: float, spread: float = 1.0) -> tuple[float, float]:
    """Fit (a, b) of the low-dimensional membership curve Phi(d) = 1/(1+a d^(2b))
    to the target exp(-(d - min_dist)/spread) (1.0 inside min_dist) by damped
    Gauss-Newton on a dense grid."""
    d = np.linspace(0.0, 3.0 * spread, 300)
    target = np.where(d < min_dist, 1.0, np.exp(-(d - min_dist) / spread))
    a, b = 1.5, 1.0
    lam = 1e-3
    mask = d > 0
    dm = d[mask]
    tm = target[mask]

    def resid(a, b):
        phi = 1.0 / (1.0 + a * dm ** (2.0 * b))
        return phi - tm, phi

    r, phi = resid(a, b)
    rss = float(r @ r)
    for _ in range(200):
        d2b = dm ** (2.0 * b)
        da = -d2b * phi**2
        db = -2.0 * a * np.log(dm) * d2b * phi**2
        J = np.stack([da, db], axis=1)
        g = J.T @ r
        H = J.T @ J + lam * np.eye(2)
        step = np.linalg.solve(H, -g)
        a2, b2 = max(a + step[0], 1e-3), max(b + step[1], 1e-3)
        r2, phi2 = resid(a2, b2)
        rss2 = float(r2 @ r2)
        if rss2 < rss:
            if rss - rss2 < 1e-14 * max(rss, 1e-300):
                a, b, r, phi, rss = a2, b2, r2, phi2, rss2
                break
            a, b, r, phi, rss = a2, b2, r2, phi2, rss2
            lam *= 0.1
        else:
            lam *= 10.0
    return float(a), float(b)


def curve_params(min_dist: float) -> tuple[float, float]:
    if min_dist not in _CURVE_CACHE:
        _CURVE_CACHE[min_dist] = fit_curve_params(min_dist)
    return _CURVE_CACHE[min_dist]


def knn_graph(points: np.ndarray, n_neighbors: int):
    """Exact brute-force kNN (Euclidean); ties broken by lower point index."""
    n = points.shape[0]
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :n_neighbors]
    dist = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return order, dist


def smooth_knn_sigma(dist_row: np.ndarray, target: float):
    """Bisect the bandwidth so the fuzzy membership row sums to ``target``.

    Returns (rho, sigma). When every neighbor sits at distance rho the sum
    is constant in sigma; the bisection then bottoms out at the lower clamp.
    """
    rho = float(dist_row[0])
    adj = np.maximum(dist_row - rho, 0.0)
    lo, hi = 0.0, 1.0
    for _ in range(SMOOTH_MAX_ITER):
        if np.exp(-adj / hi).sum() >= target:
            break
        hi *= 2.0
    sigma = hi
    for _ in range(SMOOTH_MAX_ITER):
        sigma = 0.5 * (lo + hi)
        s = float(np.exp(-adj / max(sigma, 1e-12)).sum())
        if abs(s - target) < SMOOTH_TOL:
            break
        if s > target:
            hi = sigma
        else:
            lo = sigma
    mean_d = float(dist_row.mean())
    return rho, max(sigma, 1e-3 * max(mean_d, 1e-12))


def fuzzy_graph(points: np.ndarray, n_neighbors: int):
    """Symmetrized fuzzy membership matrix (dense n x n) plus the kNN arrays."""
    n = points.shape[0]
    idx, dist = knn_graph(points, n_neighbors)
    target = np.log2(n_neighbors)
    w = np.zeros((n, n))
    for i in range(n):
        rho, sigma = smooth_knn_sigma(dist[i], target)
        w[i, idx[i]] = np.exp(-np.maximum(dist[i] - rho, 0.0) / sigma)
    sym = w + w.T - w * w.T
    return sym, idx, dist


def spectral_init(sym: np.ndarray, seed: int) -> np.ndarray:
    """Two smallest nontrivial eigenvectors of the normalized Laplacian,
    scaled to a +-10 box; seeded Gaussian fallback if the solve degenerates."""
    n = sym.shape[0]
    deg = sym.sum(axis=1)
    if np.any(deg <= 0):
        return _gaussian_init(n, seed)
    dinv = 1.0 / np.sqrt(deg)
    lap = np.eye(n) - (dinv[:, None] * sym) * dinv[None, :]
    try:
        vals, vecs = np.linalg.eigh(lap)
    except np.linalg.LinAlgError:
        return _gaussian_init(n, seed)
    emb = vecs[:, 1:3]
    if emb.shape[1] < 2 or not np.isfinite(emb).all():
        return _gaussian_init(n, seed)
    # deterministic sign: largest-magnitude component positive
    for j in range(2):
        k = int(np.argmax(np.abs(emb[:, j])))
        if emb[k, j] < 0:
            emb[:, j] = -emb[:, j]
    peak = np.abs(emb).max()
    if peak < 1e-12:
        return _gaussian_init(n, seed)
    return np.ascontiguousarray(emb * (10.0 / peak))


def _gaussian_init(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, 10.0, size=(n, 2))


class _Xorshift:
    """Tiny deterministic integer RNG for negative sampling."""

    def __init__(self, seed: int):
        self.state = (seed * 2654435761 + 1) & 0xFFFFFFFF or 1

    def next(self, n: int) -> int:
        x = self.state
        x ^= (x << 13) & 0xFFFFFFFF
        x ^= x >> 17
        x ^= (x << 5) & 0xFFFFFFFF
        self.state = x
        return x % n


@dataclass
class Embedding2D:
    coords: np.ndarray           # (n, 2)
    graph: np.ndarray            # symmetrized fuzzy memberships
    a: float
    b: float


def umap_embed(
    points: np.ndarray,
    n_neighbors: int = 15,
    min_dist: float = 0.1,
    epochs: int = 500,
    seed: int = 0,
) -> Embedding2D:
    """Project points (n, d) to 2-D.

    Deterministic for a fixed seed: exact kNN, bisected fuzzy memberships,
    spectral init, then umap-style SGD over the edge list with 5 negative
    samples per positive move and a linearly decaying learning rate.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be 2-D (n, features)")
    n = pts.shape[0]
    if n < 3:
        raise ValueError("need at least 3 points")
    n_neighbors = min(n_neighbors, n - 1)

    sym, _, _ = fuzzy_graph(pts, n_neighbors)
    a, b = curve_params(min_dist)
    emb = spectral_init(sym, seed)

    heads, tails = np.nonzero(sym > 0.0)
    weights = sym[heads, tails]
    max_w = weights.max()
    if max_w <= 0:
        return Embedding2D(emb, sym, a, b)
    epochs_per_sample = max_w / weights          # edge fires every this many epochs
    next_due = epochs_per_sample.copy()
    rng = _Xorshift(seed + 1)

    coords = emb
    nv = NEG_SAMPLE_RATE
    for epoch in range(1, epochs + 1):
        alpha = 1.0 - (epoch - 1) / epochs
        for e in range(heads.size):
            if next_due[e] > epoch:
                continue
            next_due[e] += epochs_per_sample[e]
            i = heads[e]
            j = tails[e]
            xi, yi = coords[i]
            xj, yj = coords[j]
            dx, dy = xi - xj, yi - yj
            d2 = dx * dx + dy * dy
            if d2 > 0.0:
                grad = (-2.0 * a * b * d2 ** (b - 1.0)) / (1.0 + a * d2**b)
                gx = min(MOVE_CLIP, max(-MOVE_CLIP, grad * dx)) * alpha
                gy = min(MOVE_CLIP, max(-MOVE_CLIP, grad * dy)) * alpha
                coords[i, 0] += gx
                coords[i, 1] += gy
                coords[j, 0] -= gx
                coords[j, 1] -= gy
                xi, yi = coords[i]
            for _ in range(nv):
                k = rng.next(n)
                if k == i:
                    continue
                dx = xi - coords[k, 0]
                dy = yi - coords[k, 1]
                d2 = dx * dx + dy * dy
                grad = (2.0 * b) / ((0.001 + d2) * (1.0 + a * d2**b))
                gx = min(MOVE_CLIP, max(-MOVE_CLIP, grad * dx)) * alpha
                gy = min(MOVE_CLIP, max(-MOVE_CLIP, grad * dy)) * alpha
                coords[i, 0] += gx
                coords[i, 1] += gy
                xi, yi = coords[i]
    return Embedding2D(coords, sym, a, b)


def trustworthiness(points: np.ndarray, coords: np.ndarray, k: int = 10) -> float:
    """Rank-based trustworthiness of an embedding (brute-force ranks)."""
    n = points.shape[0]
    d_hi = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)
    d_lo = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d_hi, np.inf)
    np.fill_diagonal(d_lo, np.inf)
    rank_hi = np.argsort(np.argsort(d_hi, axis=1, kind="stable"), axis=1, kind="stable")
    nn_lo = np.argsort(d_lo, axis=1, kind="stable")[:, :k]
    total = 0.0
    for i in range(n):
        for j in nn_lo[i]:
            r = rank_hi[i, j]
            if r >= k:
                total += r - k + 1
    norm = n * k * (2 * n - 3 * k - 1) / 2.0
    return 1.0 - 2.0 * total / norm