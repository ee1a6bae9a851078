"""Scalar-on-tensor Tucker regression from 25x10x10 ratio series to a fire's
logistic parameters, and the combined forecast-then-regress prediction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .convlstm import OBSERVED_FRAMES, ExogenousPolicy, rollout_forecast
from .logistic import SubgridRejected
from .nn import load_checkpoint, save_checkpoint


@dataclass
class TuckerConfig:
    ranks: tuple[int, int, int] = (4, 3, 3)
    ridge: float = 1e-3
    max_sweeps: int = 100
    tol: float = 1e-6
    seed: int = 0
    n_random_starts: int = 4

    def validate(self, shape) -> None:
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        for r, ext in zip(self.ranks, shape):
            if not 1 <= r <= ext:
                raise ValueError(f"rank {r} out of range for mode extent {ext}")


@dataclass
class TuckerWeights:
    """Low-multilinear-rank weight tensor W = core x1 u1 x2 u2 x3 u3, plus bias."""

    core: np.ndarray     # (r1, r2, r3)
    u1: np.ndarray       # (t, r1)
    u2: np.ndarray       # (h, r2)
    u3: np.ndarray       # (w, r3)
    bias: float

    def dense(self) -> np.ndarray:
        """Materialize the full weight tensor (tests / small problems only)."""
        return np.einsum("abc,ta,rb,sc->trs", self.core, self.u1, self.u2, self.u3)


def tucker_predict(w: TuckerWeights, x: np.ndarray) -> float | np.ndarray:
    """<W, X> + b computed by contracting X along the factors (W never built).

    ``x`` is one (t, h, w) tensor or a batch (n, t, h, w); returns a scalar
    or a vector accordingly.
    """
    single = x.ndim == 3
    xs = x[None] if single else x
    # contract one mode at a time: (n,t,h,w) -> (n,t,r2,w) -> (n,t,r2,r3) -> (n,r1,r2,r3)
    z = np.einsum("nthw,hb->ntbw", xs, w.u2)
    z = np.einsum("ntbw,wc->ntbc", z, w.u3)
    z = np.einsum("ntbc,ta->nabc", z, w.u1)
    out = np.einsum("nabc,abc->n", z, w.core) + w.bias
    return float(out[0]) if single else out


def _design_u1(x, core, u2, u3):
    z = np.einsum("nthw,hb->ntbw", x, u2)
    z = np.einsum("ntbw,wc->ntbc", z, u3)
    return np.einsum("ntbc,abc->nta", z, core)   # features for u1, per (t, a)


def _design_u2(x, core, u1, u3):
    z = np.einsum("nthw,ta->nahw", x, u1)
    z = np.einsum("nahw,wc->nahc", z, u3)
    return np.einsum("nahc,abc->nhb", z, core)


def _design_u3(x, core, u1, u2):
    z = np.einsum("nthw,ta->nahw", x, u1)
    z = np.einsum("nahw,hb->nabw", z, u2)
    return np.einsum("nabw,abc->nwc", z, core)


def _core_design(x, u1, u2, u3):
    z = np.einsum("nthw,hb->ntbw", x, u2)
    z = np.einsum("ntbw,wc->ntbc", z, u3)
    return np.einsum("ntbc,ta->nabc", z, u1)


def _ridge_solve(design: np.ndarray, resid: np.ndarray, lam: float) -> np.ndarray:
    n_feat = design.shape[1]
    a = design.T @ design + lam * np.eye(n_feat)
    return np.linalg.solve(a, design.T @ resid)


def _objective(w: TuckerWeights, x, y, lam: float) -> float:
    pred = tucker_predict(w, x)
    penalty = lam * (
        float(np.sum(w.core**2))
        + float(np.sum(w.u1**2))
        + float(np.sum(w.u2**2))
        + float(np.sum(w.u3**2))
    )
    return float(np.sum((y - pred) ** 2)) + penalty


@dataclass
class TuckerFitResult:
    weights: TuckerWeights
    objective_history: list[float] = field(default_factory=list)
    sweeps: int = 0


def _als(x, y, config: TuckerConfig, w: TuckerWeights) -> TuckerFitResult:
    """Alternating ridge least squares over blocks u1, u2, u3, (core, bias).

    Every block solve is exact for the shared penalized objective, so the
    objective is asserted nonincreasing sweep over sweep.
    """
    r1, r2, r3 = config.ranks
    lam = config.ridge
    result = TuckerFitResult(weights=w)
    prev = _objective(w, x, y, lam)
    result.objective_history.append(prev)
    for sweep in range(config.max_sweeps):
        resid = y - w.bias
        w.u1 = _ridge_solve(
            _design_u1(x, w.core, w.u2, w.u3).reshape(x.shape[0], -1), resid, lam
        ).reshape(x.shape[1], r1)
        w.u2 = _ridge_solve(
            _design_u2(x, w.core, w.u1, w.u3).reshape(x.shape[0], -1), resid, lam
        ).reshape(x.shape[2], r2)
        w.u3 = _ridge_solve(
            _design_u3(x, w.core, w.u1, w.u2).reshape(x.shape[0], -1), resid, lam
        ).reshape(x.shape[3], r3)
        z = _core_design(x, w.u1, w.u2, w.u3).reshape(x.shape[0], -1)
        design = np.concatenate([z, np.ones((x.shape[0], 1))], axis=1)
        n_feat = design.shape[1]
        reg = lam * np.eye(n_feat)
        reg[-1, -1] = 0.0     # bias is not penalized
        try:
            theta = np.linalg.solve(design.T @ design + reg, design.T @ y)
        except np.linalg.LinAlgError as e:
            raise RuntimeError(f"ill-conditioned core system at sweep {sweep}: {e}") from e
        w.core = theta[:-1].reshape(r1, r2, r3)
        w.bias = float(theta[-1])

        obj = _objective(w, x, y, lam)
        result.objective_history.append(obj)
        if obj > prev * (1 + 1e-12) + 1e-12:
            raise AssertionError(
                f"ALS objective increased at sweep {sweep}: {prev} -> {obj}"
            )
        result.sweeps = sweep + 1
        if prev - obj <= config.tol * max(prev, 1e-300):
            break
        prev = obj
    return result


def _correlation_init(x, y, ranks) -> tuple[np.ndarray, ...]:
    """Factor init from the HOSVD of the target/input correlation tensor.

    For centered inputs, mean(y_n * X_n) estimates the dense weight tensor,
    so its leading mode subspaces are a far better ALS basin than white
    noise; random restarts alone routinely stall in poor stationary points.
    """
    yc = y - y.mean()
    corr = np.einsum("n,nthw->thw", yc, x) / x.shape[0]
    factors = []
    for mode, r in enumerate(ranks):
        m = np.moveaxis(corr, mode, 0).reshape(corr.shape[mode], -1)
        u_svd = np.linalg.svd(m, full_matrices=False)[0]
        factors.append(np.ascontiguousarray(u_svd[:, :r]))
    core = np.einsum("thw,ta,hb,wc->abc", corr, *factors)
    return (*factors, core)


def tucker_fit(x: np.ndarray, y: np.ndarray, config: TuckerConfig | None = None) -> TuckerFitResult:
    """Fit Tucker regression weights by multi-start ALS.

    Starts from the correlation-HOSVD init plus ``n_random_starts`` seeded
    unit-variance random inits and keeps the lowest final objective; each
    start's objective is nonincreasing sweep to sweep by construction.
    """
    if config is None:
        config = TuckerConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"samples must be (n, t, h, w), got {x.shape}")
    if x.shape[0] != y.shape[0]:
        raise ValueError("sample/target count mismatch")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    config.validate(x.shape[1:])
    r1, r2, r3 = config.ranks
    rng = np.random.default_rng(config.seed)

    u1, u2, u3, core = _correlation_init(x, y, config.ranks)
    starts = [TuckerWeights(core=core, u1=u1, u2=u2, u3=u3, bias=float(y.mean()))]
    for _ in range(config.n_random_starts):
        starts.append(
            TuckerWeights(
                core=rng.normal(size=(r1, r2, r3)),
                u1=rng.normal(size=(x.shape[1], r1)),
                u2=rng.normal(size=(x.shape[2], r2)),
                u3=rng.normal(size=(x.shape[3], r3)),
                bias=float(y.mean()),
            )
        )
    best: TuckerFitResult | None = None
    for w0 in starts:
        res = _als(x, y, config, w0)
        if best is None or res.objective_history[-1] < best.objective_history[-1]:
            best = res
    return best


# ---------------------------------------------------------------------------
# checkpoint round-trip


def tucker_entries(weights: dict[str, TuckerWeights]) -> dict[str, np.ndarray]:
    entries = {}
    for name, w in weights.items():
        entries[f"{name}/core"] = w.core
        entries[f"{name}/u1"] = w.u1
        entries[f"{name}/u2"] = w.u2
        entries[f"{name}/u3"] = w.u3
        entries[f"{name}/bias"] = np.array([w.bias])
    return entries


def save_tucker(path, weights: dict[str, TuckerWeights]) -> None:
    save_checkpoint(path, tucker_entries(weights))


def load_tucker(path) -> dict[str, TuckerWeights]:
    entries = load_checkpoint(path)
    names = sorted({k.split("/")[0] for k in entries})
    out = {}
    for name in names:
        out[name] = TuckerWeights(
            core=entries[f"{name}/core"].astype(np.float64),
            u1=entries[f"{name}/u1"].astype(np.float64),
            u2=entries[f"{name}/u2"].astype(np.float64),
            u3=entries[f"{name}/u3"].astype(np.float64),
            bias=float(entries[f"{name}/bias"][0]),
        )
    return out


# ---------------------------------------------------------------------------
# combined prediction


def convlstmtr_predict(
    model,
    tucker_k: TuckerWeights,
    tucker_L: TuckerWeights,
    subgrid_data: np.ndarray,
    burn_fractions: np.ndarray,
    burn_pixels: np.ndarray,
    exog: ExogenousPolicy,
    ndvi_channel: int = 0,
    min_burn_fraction: float = 0.5,
):
    """Fire-level (k, L) prediction from observed frames plus rollout.

    ``subgrid_data`` is (n_subgrids, t, h, w, c) preprocessed samples for one
    fire; qualifying subgrids (burn fraction >= 0.5) get a 20-frame rollout
    appended to their 5 observed frames, the regression runs per subgrid,
    and the fire value is the burn-pixel-weighted mean.
    """
    qual = np.flatnonzero(np.asarray(burn_fractions) >= min_burn_fraction)
    if qual.size == 0:
        raise SubgridRejected("no subgrid reaches the 0.5 burn fraction floor")
    obs = subgrid_data[qual]
    sub_exog = ExogenousPolicy(
        channels=exog.channels,
        months=exog.months,
        lst_by_month=exog.lst_by_month[qual],
        precip_by_month=exog.precip_by_month[qual],
        firemask=exog.firemask[qual],
        evi_factor=exog.evi_factor,
    )
    forecast = rollout_forecast(model, obs[:, :OBSERVED_FRAMES], sub_exog)
    series = np.concatenate(
        [obs[:, :OBSERVED_FRAMES, :, :, ndvi_channel], forecast], axis=1
    )
    k_hat = tucker_predict(tucker_k, series)
    L_hat = tucker_predict(tucker_L, series)
    weights = np.asarray(burn_pixels, dtype=float)[qual]
    total = weights.sum()
    if total <= 0:
        raise SubgridRejected("qualifying subgrids contain no burned pixels")
    return (
        float((k_hat * weights).sum() / total),
        float((L_hat * weights).sum() / total),
        series,
        qual,
    )
