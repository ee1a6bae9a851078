"""Synthetic fire generator with known per-pixel recovery parameters.

Every generated stack satisfies the raw NDVI range by construction, and the
de-seasonalized ratio at burned pixels equals the planted logistic curve
exactly when noise is disabled, which is what makes the generator usable as
a verification oracle for the whole pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .logistic import logistic_curve
from .raster import DEFAULT_CHANNELS, FireRecord, RasterStack, step_month

K_RANGE = (-1.2, 0.7)
REF_MEAN = 0.55
REF_AMPLITUDE = 0.15


@dataclass
class SynthConfig:
    n_fires: int = 40
    height: int = 50
    width: int = 50
    t_len: int = 25
    sigma: float = 0.05
    dropout: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_fires < 1:
            raise ValueError("n_fires must be positive")
        if self.height < 1 or self.width < 1 or self.t_len < 2:
            raise ValueError("grid dimensions must be positive and t_len >= 2")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")


@dataclass
class SynthTruth:
    """Planted ground truth for one fire."""

    k_true: np.ndarray        # (h, w)
    L_true: np.ndarray        # (h, w)
    t0_true: np.ndarray       # (h, w)
    burn_mask: np.ndarray     # (h, w) bool
    ref: np.ndarray           # (12, h, w) monthly reference NDVI
    sigma: float
    dropout: float


def load_synth_config(path) -> SynthConfig:
    """Read a flat key=value synth config file."""
    cfg = SynthConfig()
    fields = {f: type(getattr(cfg, f)) for f in cfg.__dataclass_fields__}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            setattr(cfg, key, fields[key](value))
    cfg.validate()
    return cfg


def smooth_field(rng: np.random.Generator, height: int, width: int, coarse: int = 5) -> np.ndarray:
    """Low-frequency random field in [-1, 1]: coarse white noise, bilinearly upsampled."""
    grid = rng.normal(size=(coarse + 1, coarse + 1))
    rows = np.linspace(0.0, coarse, height)
    cols = np.linspace(0.0, coarse, width)
    r0 = np.minimum(rows.astype(int), coarse - 1)
    c0 = np.minimum(cols.astype(int), coarse - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    g00 = grid[np.ix_(r0, c0)]
    g01 = grid[np.ix_(r0, c0 + 1)]
    g10 = grid[np.ix_(r0 + 1, c0)]
    g11 = grid[np.ix_(r0 + 1, c0 + 1)]
    field = (
        g00 * (1 - fr) * (1 - fc)
        + g01 * (1 - fr) * fc
        + g10 * fr * (1 - fc)
        + g11 * fr * fc
    )
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def connected_blob(rng: np.random.Generator, height: int, width: int, fraction: float) -> np.ndarray:
    """Random 4-connected blob grown from the grid center covering ``fraction`` of cells."""
    target = max(1, int(round(fraction * height * width)))
    mask = np.zeros((height, width), dtype=bool)
    start = (height // 2, width // 2)
    mask[start] = True
    frontier = []

    def push_neighbors(r, c):
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < height and 0 <= nc < width and not mask[nr, nc]:
                frontier.append((nr, nc))

    push_neighbors(*start)
    count = 1
    while count < target and frontier:
        idx = int(rng.integers(len(frontier)))
        r, c = frontier.pop(idx)
        if mask[r, c]:
            continue
        mask[r, c] = True
        count += 1
        push_neighbors(r, c)
    return mask


def _clipped_noise(rng: np.random.Generator, sigma: float, shape) -> np.ndarray:
    # Truncated at 4 sigma so the raw NDVI range cannot be violated by a tail draw.
    if sigma == 0:
        return np.zeros(shape)
    return np.clip(rng.normal(0.0, sigma, size=shape), -4.0 * sigma, 4.0 * sigma)


def synth_generate(config: SynthConfig, seed: int | None = None):
    """Generate (catalog, stacks, truths) for ``config.n_fires`` synthetic fires.

    ``stacks`` and ``truths`` are dicts keyed by fire id. A fixed (config,
    seed) pair yields bit-identical output.
    """
    config.validate()
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(seed)
    h, w, t_len = config.height, config.width, config.t_len
    sigma, dropout = config.sigma, config.dropout

    catalog: list[FireRecord] = []
    stacks: dict[str, RasterStack] = {}
    truths: dict[str, SynthTruth] = {}

    for i in range(config.n_fires):
        fid = f"F{i + 1:03d}"
        lon = float(rng.uniform(-124.0, -114.0))
        lat = float(rng.uniform(32.5, 42.0))
        year = 2013 + int(rng.integers(0, 8))
        month = int(rng.integers(1, 13))
        acres = float(np.exp(rng.uniform(np.log(3000.0), np.log(200000.0))))
        record = FireRecord(fid, f"SYNTH-{i + 1:03d}", lon, lat, f"{year:04d}-{month:02d}", acres)
        start_month = record.start_month

        k_true = np.clip(rng.uniform(-1.0, 0.6) + 0.1 * smooth_field(rng, h, w), *K_RANGE)
        L_raw = rng.uniform(0.55, 1.0) + 0.1 * smooth_field(rng, h, w)
        t0_true = np.clip(rng.uniform(4.0, 14.0) + 2.0 * smooth_field(rng, h, w), 2.0, 20.0)

        season_phase = rng.uniform(0.0, 12.0)
        texture = 0.9 + 0.1 * smooth_field(rng, h, w)
        months = np.arange(12)
        ref = (REF_MEAN + REF_AMPLITUDE * np.sin(2 * np.pi * (months + season_phase) / 12.0))[
            :, None, None
        ] * texture[None, :, :]

        # Cap L so raw NDVI stays below 1 even at the +4 sigma noise extreme.
        ref_peak = ref.max(axis=0)
        L_true = np.clip(L_raw, 0.05, np.minimum(2.0, 0.97 / (ref_peak * (1.0 + 4.0 * sigma))))

        burn = connected_blob(rng, h, w, float(rng.uniform(0.4, 0.9)))

        lst_phase = rng.uniform(0.0, 12.0)
        lst_texture = 6.0 * smooth_field(rng, h, w)
        precip_phase = rng.uniform(0.0, 12.0)
        precip_texture = 1.2 * smooth_field(rng, h, w)

        t = np.arange(t_len, dtype=float)
        frame_months = np.array([step_month(start_month, int(ti)) for ti in range(t_len)])
        ratio = np.where(
            burn[None, :, :],
            logistic_curve(L_true[None, :, :], k_true[None, :, :], t0_true[None, :, :], t[:, None, None]),
            1.0,
        )
        ref_t = ref[frame_months]
        noise = _clipped_noise(rng, sigma, (t_len, h, w))
        ndvi = (ref_t * ratio * (1.0 + noise)).astype(np.float32)
        evi = (np.float32(0.9) * ndvi).astype(np.float32)

        season = 2 * np.pi * (frame_months[:, None, None]) / 12.0
        lst = 294.0 + 12.0 * np.sin(season + 2 * np.pi * lst_phase / 12.0) + lst_texture[None, :, :]
        precip = np.maximum(
            0.0,
            2.2 + 2.0 * np.sin(season + 2 * np.pi * precip_phase / 12.0) + precip_texture[None, :, :],
        )

        qa = np.zeros((t_len, h, w), dtype=np.float32)
        if dropout > 0:
            bad = rng.random((t_len, h, w)) < dropout
            qa[bad] = rng.integers(2, 4, size=int(bad.sum())).astype(np.float32)

        data = np.stack(
            [
                ndvi,
                evi,
                lst.astype(np.float32),
                burn[None, :, :].repeat(t_len, axis=0).astype(np.float32),
                precip.astype(np.float32),
                qa,
            ],
            axis=-1,
        )
        stack = RasterStack(DEFAULT_CHANNELS, data, np.zeros(data.shape, dtype=bool))

        catalog.append(record)
        stacks[fid] = stack
        truths[fid] = SynthTruth(
            k_true=k_true,
            L_true=L_true,
            t0_true=t0_true,
            burn_mask=burn,
            ref=ref.astype(np.float32),
            sigma=sigma,
            dropout=dropout,
        )

    return catalog, stacks, truths
