"""Per-pixel logistic recovery fits and burned-area aggregation.

The recovery model is r(t) = L / (1 + exp(-k (t - t0))): L is the capacity
the ratio approaches, k the growth rate per 32-day step (negative while
vegetation keeps deteriorating), t0 the midpoint step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

L_BOUNDS = (0.0, 3.0)
K_BOUNDS = (-5.0, 5.0)
T0_BOUNDS = (-25.0, 50.0)

_EXP_CLIP = 50.0


def logistic_curve(L, k, t0, t):
    """Vectorized r(t) = L / (1 + exp(-k (t - t0))). Broadcasts over all args."""
    z = np.clip(np.asarray(k, dtype=float) * (np.asarray(t, dtype=float) - t0), -_EXP_CLIP, _EXP_CLIP)
    return L / (1.0 + np.exp(-z))


@dataclass
class LogisticParams:
    L: float
    k: float
    t0: float
    rss: float
    degenerate: bool = False


@dataclass
class GridFit:
    """Per-subgrid fit: pixel parameter grids plus burned-pixel means."""

    k: np.ndarray                 # (h, w), NaN where not fitted
    L: np.ndarray
    t0: np.ndarray
    degenerate: np.ndarray        # (h, w) bool
    mean_k: float
    mean_L: float
    n_pixels: int


@dataclass
class FireRecovery:
    fire_id: str
    mean_k: float
    mean_L: float
    n_pixels: int


class SubgridRejected(ValueError):
    """Subgrid burn fraction below the 0.5 qualification floor."""


def logistic_eval(p: LogisticParams, t) -> float:
    return float(logistic_curve(p.L, p.k, p.t0, t))


def _project(params: np.ndarray) -> np.ndarray:
    params[:, 0] = np.clip(params[:, 0], *L_BOUNDS)
    params[:, 1] = np.clip(params[:, 1], *K_BOUNDS)
    params[:, 2] = np.clip(params[:, 2], *T0_BOUNDS)
    return params


def _residual_rss(params, t, y):
    z = np.clip(params[:, 1:2] * (t[None, :] - params[:, 2:3]), -_EXP_CLIP, _EXP_CLIP)
    s = 1.0 / (1.0 + np.exp(-z))
    f = params[:, 0:1] * s
    r = f - y
    return s, r, (r * r).sum(axis=1)


def fit_pixel_batch(series: np.ndarray, max_iter: int = 200, tol: float = 1e-10):
    """Damped Gauss-Newton logistic fit for a batch of series, shape (p, t).

    Levenberg-style damping: lambda starts at 1e-3, grows 10x on a rejected
    step, shrinks 10x on an accepted one. Parameters are projected into
    their boxes after every accepted step. Returns (params (p,3), rss (p,),
    degenerate (p,) bool).
    """
    y = np.asarray(series, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if not np.isfinite(y).all():
        raise ValueError("series must be finite")
    n_pix, t_len = y.shape
    t = np.arange(t_len, dtype=np.float64)

    params = np.empty((n_pix, 3))
    rss_out = np.zeros(n_pix)
    degenerate = (y.max(axis=1) - y.min(axis=1)) == 0.0
    if degenerate.any():
        params[degenerate, 0] = 2.0 * y[degenerate].mean(axis=1)
        params[degenerate, 1] = 0.0
        params[degenerate, 2] = 12.0

    live = ~degenerate
    if not live.any():
        return params, rss_out, degenerate

    yl = y[live]
    p = np.empty((yl.shape[0], 3))
    p[:, 0] = np.clip(yl.max(axis=1), 0.1, 3.0)
    mid = 0.5 * (yl.max(axis=1) + yl.min(axis=1))
    p[:, 2] = np.argmin(np.abs(yl - mid[:, None]), axis=1).astype(float)
    p[:, 1] = np.sign(yl[:, -1] - yl[:, 0]) * 0.2
    _project(p)

    lam = np.full(p.shape[0], 1e-3)
    s, r, rss = _residual_rss(p, t, yl)
    active = np.ones(p.shape[0], dtype=bool)
    eye = np.eye(3)

    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        pa, sa, ra = p[idx], s[idx], r[idx]
        # Jacobian of the residual wrt (L, k, t0).
        ds = pa[:, 0:1] * sa * (1.0 - sa)
        J = np.stack([sa, ds * (t[None, :] - pa[:, 2:3]), -ds * pa[:, 1:2]], axis=2)
        JTJ = np.einsum("ptk,ptl->pkl", J, J)
        JTr = np.einsum("ptk,pt->pk", J, ra)
        A = JTJ + lam[idx, None, None] * eye[None, :, :]
        try:
            delta = np.linalg.solve(A, -JTr[..., None])[..., 0]
        except np.linalg.LinAlgError:
            A = A + 1e-9 * eye[None, :, :]
            delta = np.linalg.solve(A, -JTr[..., None])[..., 0]
        cand = _project(pa + delta)
        s_c, r_c, rss_c = _residual_rss(cand, t, yl[idx])

        accepted = rss_c < rss[idx]
        acc = idx[accepted]
        rej = idx[~accepted]
        rel_change = np.zeros(idx.shape[0])
        rel_change[accepted] = (rss[acc] - rss_c[accepted]) / np.maximum(rss[acc], 1e-300)
        p[acc] = cand[accepted]
        s[acc], r[acc], rss[acc] = s_c[accepted], r_c[accepted], rss_c[accepted]
        lam[acc] = lam[acc] * 0.1
        lam[rej] = lam[rej] * 10.0
        # Converged pixels leave the active set; rejected steps with huge
        # lambda have stalled and leave it too.
        done = np.zeros(idx.shape[0], dtype=bool)
        done[accepted] = rel_change[accepted] < tol
        done[~accepted] = lam[rej] > 1e12
        active[idx[done]] = False

    params[live] = p
    rss_out[live] = rss
    return params, rss_out, degenerate


def fit_pixel(series, max_iter: int = 200, tol: float = 1e-10) -> LogisticParams:
    """Fit one 25-step ratio series; flat series yield a flagged zero-rate fit."""
    params, rss, degenerate = fit_pixel_batch(np.asarray(series, dtype=float)[None, :], max_iter, tol)
    return LogisticParams(
        L=float(params[0, 0]),
        k=float(params[0, 1]),
        t0=float(params[0, 2]),
        rss=float(rss[0]),
        degenerate=bool(degenerate[0]),
    )


def fit_grid(ratio_frames: np.ndarray, burn_mask: np.ndarray, max_iter: int = 200) -> GridFit:
    """Fit every burned pixel of a (t, h, w) ratio subgrid and average.

    Requires burn fraction >= 0.5; degenerate (flat) pixels are excluded
    from the means but reported in the grids.
    """
    frames = np.asarray(ratio_frames, dtype=float)
    mask = np.asarray(burn_mask, dtype=bool)
    if frames.ndim != 3 or frames.shape[1:] != mask.shape:
        raise ValueError("ratio_frames must be (t, h, w) matching burn_mask")
    fraction = mask.mean()
    if fraction < 0.5:
        raise SubgridRejected(f"burn fraction {fraction:.2f} below 0.5")

    h, w = mask.shape
    k = np.full((h, w), np.nan)
    L = np.full((h, w), np.nan)
    t0 = np.full((h, w), np.nan)
    degen = np.zeros((h, w), dtype=bool)

    rows, cols = np.nonzero(mask)
    series = frames[:, rows, cols].T
    params, _, deg = fit_pixel_batch(series, max_iter=max_iter)
    L[rows, cols] = params[:, 0]
    k[rows, cols] = params[:, 1]
    t0[rows, cols] = params[:, 2]
    degen[rows, cols] = deg

    good = ~deg
    n = int(good.sum())
    if n == 0:
        raise SubgridRejected("all burned pixels degenerate")
    return GridFit(
        k=k,
        L=L,
        t0=t0,
        degenerate=degen,
        mean_k=float(params[good, 1].mean()),
        mean_L=float(params[good, 0].mean()),
        n_pixels=n,
    )


def aggregate_fire(fire_id: str, grid_fits) -> FireRecovery:
    """Pixel-count-weighted mean of subgrid means."""
    fits = list(grid_fits)
    if not fits:
        raise ValueError(f"no qualifying subgrids for fire {fire_id}")
    n = np.array([g.n_pixels for g in fits], dtype=float)
    ks = np.array([g.mean_k for g in fits])
    Ls = np.array([g.mean_L for g in fits])
    total = n.sum()
    return FireRecovery(
        fire_id=fire_id,
        mean_k=float((ks * n).sum() / total),
        mean_L=float((Ls * n).sum() / total),
        n_pixels=int(total),
    )
