"""Raw stacks to clean training samples: masking, imputation, de-seasonalization,
channel scaling, 10x10 partitioning, erratic-fire filtering, and the train/val split."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .raster import RasterStack, step_month

UNRELIABLE_QA = (2, 3)
REF_GUARD = 0.05
SUBGRID = 10

LST_RANGE = (240.0, 330.0)
EVI_RANGE = (-0.2, 1.0)


@dataclass(frozen=True)
class ChannelTransform:
    kind: str                 # identity | affine | log_affine | binarize
    offset: float = 0.0
    scale: float = 1.0

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return x
        if self.kind == "binarize":
            return (x >= 0.5).astype(x.dtype)
        if self.scale <= 0:
            raise ValueError("transform scale must be positive")
        v = np.log1p(np.maximum(x, 0.0)) if self.kind == "log_affine" else x
        return np.clip((v - self.offset) * self.scale, 0.0, 1.0).astype(x.dtype)

    def invert(self, y: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return y
        if self.kind == "binarize":
            raise ValueError("binarize is not invertible")
        v = y / self.scale + self.offset
        return np.expm1(v) if self.kind == "log_affine" else v


@dataclass
class ChannelScaling:
    transforms: dict[str, ChannelTransform] = field(default_factory=dict)


@dataclass
class SubgridSample:
    fire_id: str
    row_off: int
    col_off: int
    channels: tuple[str, ...]
    data: np.ndarray          # (t, 10, 10, c)
    burn_fraction: float


@dataclass
class SampleTensor:
    """The model's 5-axis input batch: (sample, timestep, row, col, channel)."""

    data: np.ndarray
    channels: tuple[str, ...]
    fire_ids: list[str]
    offsets: list[tuple[int, int]]
    burn_fraction: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    def select(self, idx) -> "SampleTensor":
        idx = np.asarray(idx)
        return SampleTensor(
            data=self.data[idx],
            channels=self.channels,
            fire_ids=[self.fire_ids[i] for i in idx],
            offsets=[self.offsets[i] for i in idx],
            burn_fraction=self.burn_fraction[idx],
        )


def mask_unreliable(stack: RasterStack) -> RasterStack:
    """Mark NDVI/EVI pixels with QA in {2, 3} missing and drop the QA channel."""
    if "QA" not in stack.channels:
        raise ValueError("stack has no QA channel")
    qa = stack.channel("QA")
    bad = np.isin(qa, UNRELIABLE_QA)
    keep = [i for i, name in enumerate(stack.channels) if name != "QA"]
    channels = tuple(stack.channels[i] for i in keep)
    data = stack.data[..., keep].copy()
    missing = stack.missing[..., keep].copy()
    for name in ("NDVI", "EVI"):
        if name in channels:
            missing[..., channels.index(name)] |= bad
    return RasterStack(channels, data, missing)


def _knn_values(coords_known, values_known, tree, coords_query, k):
    """Exact k-nearest lookup with deterministic (distance, t, row, col) ordering."""
    n_known = coords_known.shape[0]
    kq = min(n_known, k + 16)
    pending = np.arange(coords_query.shape[0])
    out = np.empty(coords_query.shape[0])
    while pending.size:
        q = coords_query[pending]
        _, idx = tree.query(q, k=kq)
        if idx.ndim == 1:
            idx = idx[:, None]
        # Integer-exact squared distances; KD-tree float output is not
        # trusted for tie detection.
        diff = coords_known[idx].astype(np.int64) - q[:, None, :].astype(np.int64)
        d2 = (diff * diff).sum(axis=2)
        order = np.lexsort((idx, d2), axis=1)
        d2s = np.take_along_axis(d2, order, axis=1)
        idxs = np.take_along_axis(idx, order, axis=1)
        take = min(k, kq)
        # A tie touching the retrieval horizon may extend past it; requery wider.
        unsafe = (kq < n_known) & (d2s[:, take - 1] == d2s[:, -1])
        safe = ~unsafe
        sel_d2 = d2s[safe, :take]
        sel_idx = idxs[safe, :take]
        w = 1.0 / np.sqrt(sel_d2.astype(float))
        out[pending[safe]] = (w * values_known[sel_idx]).sum(axis=1) / w.sum(axis=1)
        pending = pending[~safe]
        kq = min(n_known, kq * 2)
    return out


def knn_impute(stack: RasterStack, k: int = 8) -> RasterStack:
    """Fill every missing value with the inverse-distance-weighted mean of its
    k nearest non-missing values in (t, row, col) space (1 timestep = 1 pixel).

    Ties at the k-th distance are resolved toward the lowest (t, row, col),
    so the result is independent of traversal order.
    """
    if not stack.missing.any():
        return stack.copy()
    data = stack.data.copy()
    missing = stack.missing
    for ci, name in enumerate(stack.channels):
        miss = missing[..., ci]
        if not miss.any():
            continue
        if miss.all():
            raise ValueError(f"channel {name} is entirely missing; nothing to impute from")
        known = np.argwhere(~miss)           # lexicographic (t, r, c) order
        queries = np.argwhere(miss)
        values = data[..., ci][~miss]
        tree = cKDTree(known)
        data[..., ci][miss] = _knn_values(known, values, tree, queries, k).astype(data.dtype)
    return RasterStack(stack.channels, data, np.zeros_like(missing))


def deseasonalize(stack: RasterStack, ref_frames: np.ndarray, start_month: int) -> RasterStack:
    """Replace NDVI with the post/reference ratio for the matching calendar month.

    Pixels whose reference magnitude falls under 0.05 become missing instead
    of producing a blown-up ratio; run :func:`knn_impute` afterwards.
    """
    ref = np.asarray(ref_frames, dtype=np.float64)
    if ref.ndim != 3 or ref.shape[0] != 12:
        raise ValueError(f"need 12 monthly reference frames, got shape {ref.shape}")
    if ref.shape[1:] != (stack.height, stack.width):
        raise ValueError("reference frame size does not match stack")
    ci = stack.channel_index("NDVI")
    months = np.array([step_month(start_month, t) for t in range(stack.t_len)])
    ref_t = ref[months]
    guard = np.abs(ref_t) < REF_GUARD
    data = stack.data.copy()
    missing = stack.missing.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = data[..., ci] / ref_t
    ratio[guard] = 0.0
    data[..., ci] = ratio.astype(np.float32)
    missing[..., ci] |= guard
    return RasterStack(stack.channels, data, missing)


def default_scaling(stack: RasterStack) -> ChannelScaling:
    """Per-channel transforms; PRECIP's log-affine is fit on this stack."""
    transforms: dict[str, ChannelTransform] = {}
    for name in stack.channels:
        if name == "NDVI":
            transforms[name] = ChannelTransform("identity")
        elif name == "EVI":
            lo, hi = EVI_RANGE
            transforms[name] = ChannelTransform("affine", offset=lo, scale=1.0 / (hi - lo))
        elif name == "LST":
            lo, hi = LST_RANGE
            transforms[name] = ChannelTransform("affine", offset=lo, scale=1.0 / (hi - lo))
        elif name == "PRECIP":
            logged = np.log1p(np.maximum(stack.channel("PRECIP"), 0.0))
            lo, hi = float(logged.min()), float(logged.max())
            scale = 1.0 / (hi - lo) if hi > lo else 1.0
            transforms[name] = ChannelTransform("log_affine", offset=lo, scale=scale)
        elif name == "FIREMASK":
            transforms[name] = ChannelTransform("binarize")
        else:
            raise ValueError(f"no scaling rule for channel {name}")
    return ChannelScaling(transforms)


def scale_channels(stack: RasterStack, scaling: ChannelScaling | None = None):
    """Apply (or fit then apply) the per-channel scaling. Returns (stack, scaling)."""
    if scaling is None:
        scaling = default_scaling(stack)
    data = stack.data.copy()
    for ci, name in enumerate(stack.channels):
        data[..., ci] = scaling.transforms[name].apply(data[..., ci])
    return RasterStack(stack.channels, data, stack.missing.copy()), scaling


def partition_subgrids(stack: RasterStack, fire_id: str = "") -> list[SubgridSample]:
    """Tile the stack into non-overlapping 10x10 subgrids in row-major order."""
    if stack.height % SUBGRID or stack.width % SUBGRID:
        raise ValueError(
            f"grid {stack.height}x{stack.width} not divisible by {SUBGRID}"
        )
    if stack.missing.any():
        raise ValueError("impute before partitioning; missing values remain")
    fm = stack.channel_index("FIREMASK") if "FIREMASK" in stack.channels else None
    out = []
    for r0 in range(0, stack.height, SUBGRID):
        for c0 in range(0, stack.width, SUBGRID):
            tile = stack.data[:, r0 : r0 + SUBGRID, c0 : c0 + SUBGRID, :].copy()
            frac = float(tile[..., fm].mean()) if fm is not None else 0.0
            out.append(
                SubgridSample(
                    fire_id=fire_id,
                    row_off=r0,
                    col_off=c0,
                    channels=stack.channels,
                    data=tile,
                    burn_fraction=frac,
                )
            )
    return out


def reassemble_subgrids(subgrids: list[SubgridSample], height: int, width: int) -> RasterStack:
    """Inverse of :func:`partition_subgrids`."""
    if not subgrids:
        raise ValueError("no subgrids to reassemble")
    t_len = subgrids[0].data.shape[0]
    n_ch = subgrids[0].data.shape[3]
    data = np.zeros((t_len, height, width, n_ch), dtype=subgrids[0].data.dtype)
    for sg in subgrids:
        data[:, sg.row_off : sg.row_off + SUBGRID, sg.col_off : sg.col_off + SUBGRID, :] = sg.data
    return RasterStack(subgrids[0].channels, data, np.zeros(data.shape, dtype=bool))


def build_sample_tensor(subgrids: list[SubgridSample]) -> SampleTensor:
    if not subgrids:
        raise ValueError("no subgrids")
    data = np.stack([sg.data for sg in subgrids]).astype(np.float32)
    st = SampleTensor(
        data=data,
        channels=subgrids[0].channels,
        fire_ids=[sg.fire_id for sg in subgrids],
        offsets=[(sg.row_off, sg.col_off) for sg in subgrids],
        burn_fraction=np.array([sg.burn_fraction for sg in subgrids]),
    )
    if data.shape[4] != 5:
        raise ValueError(f"expected 5 channels after preprocessing, got {data.shape[4]}")
    return st


def filter_erratic(
    ratio_stacks: dict[str, RasterStack],
    jump: float = 0.5,
    mean_max: float = 3.0,
    mean_min: float = 0.0,
):
    """Drop fires whose spatial-mean NDVI ratio jumps by more than ``jump`` in
    one step or ever leaves [mean_min, mean_max]. Returns (included_ids, report)."""
    included, report = [], []
    for fid in sorted(ratio_stacks):
        means = ratio_stacks[fid].channel("NDVI").mean(axis=(1, 2)).astype(float)
        steps = np.abs(np.diff(means))
        if steps.size and steps.max() > jump:
            s = int(steps.argmax())
            report.append(
                f"{fid} excluded: mean ratio jump {steps.max():.3f} at step {s}->{s + 1}"
            )
        elif means.max() > mean_max:
            report.append(f"{fid} excluded: mean ratio {means.max():.3f} above {mean_max}")
        elif means.min() < mean_min:
            report.append(f"{fid} excluded: mean ratio {means.min():.3f} below {mean_min}")
        else:
            included.append(fid)
    return included, report


def split_fire_ids(fire_ids, fraction: float = 0.8, seed: int = 0):
    """Deterministic fire-level split; all subgrids of a fire land on one side."""
    ids = sorted(set(fire_ids))
    if len(ids) < 2:
        raise ValueError("need at least 2 fires to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    n_train = int(round(fraction * len(ids)))
    n_train = max(1, min(len(ids), n_train))
    if n_train == len(ids):
        if fraction < 1.0:
            n_train = len(ids) - 1
        else:
            warnings.warn("fraction 1.0 leaves the validation set empty")
    train = sorted(ids[i] for i in perm[:n_train])
    val = sorted(ids[i] for i in perm[n_train:])
    return train, val


def split_train_val(samples: SampleTensor, fraction: float = 0.8, seed: int = 0):
    """Split a SampleTensor by fire id (no fire straddles the split)."""
    if samples.n_samples < 2:
        raise ValueError("need at least 2 samples")
    train_ids, val_ids = split_fire_ids(samples.fire_ids, fraction, seed)
    train_set = set(train_ids)
    tr_idx = [i for i, f in enumerate(samples.fire_ids) if f in train_set]
    va_idx = [i for i, f in enumerate(samples.fire_ids) if f not in train_set]
    return samples.select(tr_idx), samples.select(va_idx)


def preprocess_stack(
    stack: RasterStack,
    ref_frames: np.ndarray,
    start_month: int,
    knn_k: int = 8,
) -> tuple[RasterStack, ChannelScaling]:
    """Full single-fire chain: mask -> impute -> de-seasonalize -> re-impute -> scale."""
    st = mask_unreliable(stack)
    st = knn_impute(st, k=knn_k)
    st = deseasonalize(st, ref_frames, start_month)
    if st.missing.any():
        st = knn_impute(st, k=knn_k)
    return scale_channels(st)
