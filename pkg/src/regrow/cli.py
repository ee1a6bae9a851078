"""Pipeline orchestration: one subcommand per stage, artifacts on disk, a
tab-separated run.log manifest, and a per-output-directory lock."""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import cluster as cl
from . import convlstm as cv
from . import logistic as lg
from . import preprocess as pp
from . import raster as rs
from . import report as rp
from . import tucker as tk
from .config import RunConfig, config_text, load_config
from .nn import load_checkpoint, save_checkpoint
from .synth import synth_generate
from .umap2d import umap_embed

STAGES = [
    "synth",
    "preprocess",
    "train",
    "forecast",
    "fit-logistic",
    "tucker-fit",
    "predict-k",
    "cluster",
    "eval",
    "report",
]

RATIO_CHANNEL = "NDVI_RATIO"


class StageError(ValueError):
    """Validation failure; maps to exit code 1."""


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {path.name}; run '{producer}' first")
    return path


def _hash_paths(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        if p.is_dir():
            files = sorted(q for q in p.rglob("*") if q.is_file())
        else:
            files = [p] if p.exists() else []
        for q in files:
            h.update(str(q.name).encode())
            h.update(q.read_bytes())
    return h.hexdigest()[:16]


def _config_hash(cfg: RunConfig, seed: int) -> str:
    h = hashlib.sha256()
    h.update(config_text(cfg).encode())
    h.update(f"seed={seed}".encode())
    return h.hexdigest()[:16]


@contextmanager
def _output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError(
            f"{lock} exists: another stage is running in {out} (remove it if stale)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _manifest(out: Path, stage: str, input_hash: str, cfg_hash: str, t0: float) -> None:
    with open(out / "run.log", "a", encoding="utf-8") as f:
        f.write(f"{stage}\t{input_hash}\t{cfg_hash}\t{time.time() - t0:.3f}\n")


# ---------------------------------------------------------------------------
# shared loaders


def _read_catalog(out: Path):
    return rs.read_catalog(_require(out / "catalog.csv", "synth"))


def _read_split(out: Path) -> dict[str, str]:
    roles = {}
    with open(_require(out / "split.csv", "preprocess"), newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            roles[row["fire_id"]] = row["role"]
    return roles


def _processed_stack(out: Path, fire_id: str) -> rs.RasterStack:
    return rs.read_stack(_require(out / "processed" / f"{fire_id}.rst", "preprocess"))


def _fire_subgrid_tensor(stack: rs.RasterStack, fire_id: str) -> pp.SampleTensor:
    return pp.build_sample_tensor(pp.partition_subgrids(stack, fire_id))


def _burned_pixels(sample: pp.SampleTensor) -> np.ndarray:
    fm = sample.channels.index("FIREMASK")
    return (sample.data[:, 0, :, :, fm] >= 0.5).sum(axis=(1, 2))


# ---------------------------------------------------------------------------
# stages


def stage_synth(cfg: RunConfig, out: Path, seed: int):
    catalog, stacks, truths = synth_generate(cfg.synth, seed=seed)
    rs.write_catalog(catalog, out / "catalog.csv")
    (out / "stacks").mkdir(exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    for rec in catalog:
        rs.write_stack(stacks[rec.id], out / "stacks" / f"{rec.id}.rst")
        tr = truths[rec.id]
        for name, arr in (
            ("k", tr.k_true),
            ("L", tr.L_true),
            ("t0", tr.t0_true),
            ("burn", tr.burn_mask),
            ("ref", tr.ref),
        ):
            np.save(out / "truth" / f"{rec.id}_{name}.npy", arr)
    print(f"synth: {len(catalog)} fires -> {out / 'stacks'}")
    return [out / "catalog.csv"]


def stage_preprocess(cfg: RunConfig, out: Path, seed: int):
    catalog = _read_catalog(out)
    stacks_dir = _require(out / "stacks", "synth")
    truth_dir = _require(out / "truth", "synth")
    proc_dir = out / "processed"
    proc_dir.mkdir(exist_ok=True)
    processed = {}
    for rec in catalog:
        raw = rs.read_stack(stacks_dir / f"{rec.id}.rst")
        ref = np.load(truth_dir / f"{rec.id}_ref.npy")
        proc, _scaling = pp.preprocess_stack(raw, ref, rec.start_month, knn_k=cfg.knn_k)
        processed[rec.id] = proc
    included, excluded_report = pp.filter_erratic(
        processed,
        jump=cfg.erratic_jump,
        mean_max=cfg.erratic_mean_max,
        mean_min=cfg.erratic_mean_min,
    )
    with open(out / "excluded.txt", "w", encoding="utf-8") as f:
        for line in excluded_report:
            f.write(line + "\n")
    for fid in included:
        rs.write_stack(processed[fid], proc_dir / f"{fid}.rst")

    if cfg.holdout_fraction > 0 and len(included) >= 3:
        pipeline_ids, holdout_ids = pp.split_fire_ids(
            included, 1.0 - cfg.holdout_fraction, seed=seed + 101
        )
    else:
        pipeline_ids, holdout_ids = list(included), []
    train_ids, val_ids = pp.split_fire_ids(pipeline_ids, cfg.split_fraction, seed=seed)

    with open(out / "split.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["fire_id", "role"])
        for fid in included:
            role = "train" if fid in train_ids else "val" if fid in val_ids else "holdout"
            writer.writerow([fid, role])
    with open(out / "samples.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["fire_id", "row_off", "col_off", "burn_fraction"])
        for fid in included:
            for sg in pp.partition_subgrids(processed[fid], fid):
                writer.writerow([fid, sg.row_off, sg.col_off, f"{sg.burn_fraction:.6f}"])
    print(
        f"preprocess: {len(included)} fires kept ({len(excluded_report)} excluded), "
        f"{len(train_ids)} train / {len(val_ids)} val / {len(holdout_ids)} holdout"
    )
    return [out / "catalog.csv", stacks_dir, truth_dir]


def _split_tensors(cfg: RunConfig, out: Path):
    roles = _read_split(out)
    subs = {"train": [], "val": []}
    for fid, role in sorted(roles.items()):
        if role not in subs:
            continue
        stack = _processed_stack(out, fid)
        subs[role].extend(pp.partition_subgrids(stack, fid))
    if not subs["train"]:
        raise StageError("split contains no training fires")
    return pp.build_sample_tensor(subs["train"]), pp.build_sample_tensor(subs["val"])


def stage_train(cfg: RunConfig, out: Path, seed: int):
    train_st, val_st = _split_tensors(cfg, out)
    model = cv.ConvLSTMModel(in_channels=train_st.data.shape[4], seed=seed)
    log_path = out / "training_log.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "train_mae", "val_mae"])
        result = cv.train(
            model,
            train_st,
            val_st,
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            seed=seed,
            lr0=cfg.lr0,
            decay=cfg.lr_decay,
            lr_step=cfg.lr_step,
            log=lambda row: (
                writer.writerow(
                    [row["epoch"], f"{row['lr']:.6g}", f"{row['train_mae']:.6f}", f"{row['val_mae']:.6f}"]
                ),
                f.flush(),
            ),
        )
    save_checkpoint(out / "checkpoint.ckp", model.state_entries())
    print(
        f"train: {cfg.epochs} epochs on {train_st.n_samples} samples, "
        f"best val MAE {result.best_val:.4f} at epoch {result.best_epoch}"
    )
    return [out / "split.csv", out / "processed"]


def _load_model(cfg: RunConfig, out: Path) -> cv.ConvLSTMModel:
    entries = load_checkpoint(_require(out / "checkpoint.ckp", "train"))
    model = cv.ConvLSTMModel(in_channels=5)
    model.load_state(entries)
    return model


def stage_forecast(cfg: RunConfig, out: Path, seed: int):
    catalog = {r.id: r for r in _read_catalog(out)}
    roles = _read_split(out)
    model = _load_model(cfg, out)
    fdir = out / "forecasts"
    fdir.mkdir(exist_ok=True)
    for fid in sorted(roles):
        stack = _processed_stack(out, fid)
        sample = _fire_subgrid_tensor(stack, fid)
        exog = cv.ExogenousPolicy.from_series(
            sample.data, sample.channels, catalog[fid].start_month
        )
        preds = cv.rollout_forecast(model, sample.data[:, : cv.OBSERVED_FRAMES], exog)
        ndvi = sample.channels.index("NDVI")
        series = np.concatenate(
            [sample.data[:, : cv.OBSERVED_FRAMES, :, :, ndvi], preds], axis=1
        )
        tiles = []
        for i, (r0, c0) in enumerate(sample.offsets):
            tiles.append(
                pp.SubgridSample(
                    fire_id=fid,
                    row_off=r0,
                    col_off=c0,
                    channels=(RATIO_CHANNEL,),
                    data=series[i][..., None],
                    burn_fraction=sample.burn_fraction[i],
                )
            )
        full = pp.reassemble_subgrids(tiles, stack.height, stack.width)
        rs.write_stack(full, fdir / f"{fid}.rst")
    print(f"forecast: {len(roles)} fires -> {fdir}")
    return [out / "checkpoint.ckp", out / "processed", out / "split.csv"]


def stage_fit_logistic(cfg: RunConfig, out: Path, seed: int):
    roles = _read_split(out)
    rows = []
    fire_rows = []
    for fid in sorted(roles):
        stack = _processed_stack(out, fid)
        sample = _fire_subgrid_tensor(stack, fid)
        ndvi = sample.channels.index("NDVI")
        fm = sample.channels.index("FIREMASK")
        fits = []
        for i, (r0, c0) in enumerate(sample.offsets):
            mask = sample.data[i, 0, :, :, fm] >= 0.5
            try:
                gf = lg.fit_grid(sample.data[i, :, :, :, ndvi], mask)
            except lg.SubgridRejected as e:
                rows.append([fid, r0, c0, "", "", 0, f"rejected: {e}"])
                continue
            fits.append(gf)
            rows.append(
                [fid, r0, c0, f"{gf.mean_k:.6f}", f"{gf.mean_L:.6f}", gf.n_pixels, "ok"]
            )
        if fits:
            rec = lg.aggregate_fire(fid, fits)
            fire_rows.append([fid, f"{rec.mean_k:.6f}", f"{rec.mean_L:.6f}", rec.n_pixels])
    with open(out / "fits.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["fire_id", "row_off", "col_off", "mean_k", "mean_L", "n_pixels", "flags"])
        writer.writerows(rows)
    with open(out / "fires_fit.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["fire_id", "k_fit", "L_fit", "n_pixels"])
        writer.writerows(fire_rows)
    print(f"fit-logistic: {len(fire_rows)} fires with qualifying subgrids")
    return [out / "processed", out / "split.csv"]


def _read_fits(out: Path):
    fits = {}
    with open(_require(out / "fits.csv", "fit-logistic"), newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            if row["flags"] != "ok":
                continue
            key = (row["fire_id"], int(row["row_off"]), int(row["col_off"]))
            fits[key] = (float(row["mean_k"]), float(row["mean_L"]), int(row["n_pixels"]))
    return fits


def stage_tucker_fit(cfg: RunConfig, out: Path, seed: int):
    roles = _read_split(out)
    fits = _read_fits(out)
    xs, yk, yl = [], [], []
    for fid in sorted(roles):
        if roles[fid] == "holdout":
            continue
        stack = _processed_stack(out, fid)
        sample = _fire_subgrid_tensor(stack, fid)
        ndvi = sample.channels.index("NDVI")
        for i, (r0, c0) in enumerate(sample.offsets):
            key = (fid, r0, c0)
            if key not in fits:
                continue
            xs.append(sample.data[i, :, :, :, ndvi])
            yk.append(fits[key][0])
            yl.append(fits[key][1])
    if len(xs) < 2:
        raise StageError("fewer than 2 qualifying training subgrids for the regression")
    x = np.stack(xs)
    tcfg = tk.TuckerConfig(
        ranks=tuple(cfg.tucker_ranks),
        ridge=cfg.tucker_ridge,
        max_sweeps=cfg.tucker_sweeps,
        tol=cfg.tucker_tol,
        seed=seed,
    )
    res_k = tk.tucker_fit(x, np.array(yk), tcfg)
    res_l = tk.tucker_fit(x, np.array(yl), tcfg)
    tk.save_tucker(out / "tucker.ckp", {"tucker_k": res_k.weights, "tucker_L": res_l.weights})
    print(
        f"tucker-fit: {x.shape[0]} subgrids, objectives "
        f"k={res_k.objective_history[-1]:.4f} L={res_l.objective_history[-1]:.4f}"
    )
    return [out / "fits.csv", out / "processed", out / "split.csv"]


def stage_predict_k(cfg: RunConfig, out: Path, seed: int):
    roles = _read_split(out)
    weights = tk.load_tucker(_require(out / "tucker.ckp", "tucker-fit"))
    fdir = _require(out / "forecasts", "forecast")
    rows = []
    for fid in sorted(roles):
        stack = _processed_stack(out, fid)
        sample = _fire_subgrid_tensor(stack, fid)
        forecast = rs.read_stack(fdir / f"{fid}.rst")
        tiles = pp.partition_subgrids(forecast, fid)
        ratio = np.stack([sg.data[..., 0] for sg in tiles])
        qual = np.flatnonzero(sample.burn_fraction >= 0.5)
        if qual.size == 0:
            continue
        burned = _burned_pixels(sample)
        k_hat = tk.tucker_predict(weights["tucker_k"], ratio[qual])
        l_hat = tk.tucker_predict(weights["tucker_L"], ratio[qual])
        w = burned[qual].astype(float)
        if w.sum() <= 0:
            continue
        rows.append(
            [
                fid,
                f"{float((k_hat * w).sum() / w.sum()):.6f}",
                f"{float((l_hat * w).sum() / w.sum()):.6f}",
                qual.size,
            ]
        )
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["fire_id", "k_hat", "L_hat", "n_subgrids"])
        writer.writerows(rows)
    print(f"predict-k: {len(rows)} fires")
    return [out / "tucker.ckp", out / "forecasts", out / "processed"]


def _read_predictions(out: Path):
    preds = {}
    with open(_require(out / "predictions.csv", "predict-k"), newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            preds[row["fire_id"]] = (float(row["k_hat"]), float(row["L_hat"]))
    return preds


def stage_cluster(cfg: RunConfig, out: Path, seed: int):
    catalog = _read_catalog(out)
    preds = _read_predictions(out)
    stacks_dir = _require(out / "stacks", "synth")
    precip = {}
    for fid in preds:
        precip[fid] = cl.precip_mean_first_steps(rs.read_stack(stacks_dir / f"{fid}.rst"))
    features = cl.build_features(preds, catalog, precip)
    norm, _transforms = cl.minmax_normalize(features)
    emb = umap_embed(
        norm,
        n_neighbors=cfg.umap_neighbors,
        min_dist=cfg.umap_min_dist,
        epochs=cfg.umap_epochs,
        seed=seed,
    )
    k_hat = np.array([f.k_hat for f in features])
    assignment = cl.assign_clusters(
        [f.fire_id for f in features], emb.coords, k_hat, counts=tuple(cfg.cluster_ks), seed=seed
    )
    cl.export_geo(features, assignment, out / "clusters.csv", svg_dir=str(out))
    with open(out / "embedding.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["fire_id", "u", "v"])
        for feat, (u, v) in zip(features, emb.coords):
            writer.writerow([feat.fire_id, f"{u:.6f}", f"{v:.6f}"])
    print(f"cluster: {len(features)} fires embedded and clustered at k={tuple(cfg.cluster_ks)}")
    return [out / "predictions.csv", out / "catalog.csv", stacks_dir]


def stage_eval(cfg: RunConfig, out: Path, seed: int, scope: str = "holdout"):
    roles = _read_split(out)
    preds = _read_predictions(out)
    baseline = {}
    with open(_require(out / "fires_fit.csv", "fit-logistic"), newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            baseline[row["fire_id"]] = float(row["k_fit"])
    if scope == "holdout":
        chosen = {f: k for f, (k, _) in preds.items() if roles.get(f) == "holdout"}
        if not chosen:
            raise StageError("no holdout fires among predictions; run with --scope all?")
    else:
        chosen = {f: k for f, (k, _) in preds.items()}
    report = rp.eval_k_errors(chosen, baseline)
    rp.write_eval_csv(report, chosen, baseline, out / "eval.csv")
    rp.write_histogram_svg(report, out / "k_error_hist.svg")
    print(
        f"eval[{scope}]: {len(report.fire_ids)} fires, "
        f"P50={report.p50:.4f} P75={report.p75:.4f} P90={report.p90:.4f}"
    )
    return [out / "predictions.csv", out / "fires_fit.csv", out / "split.csv"]


def stage_report(cfg: RunConfig, out: Path, seed: int):
    lines = ["pipeline report", "================"]
    log = out / "run.log"
    if log.exists():
        lines.append("\nstages run (stage, input hash, config hash, seconds):")
        lines.extend("  " + ln.strip() for ln in log.read_text().splitlines())
    tl = out / "training_log.csv"
    if tl.exists():
        with open(tl, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        if rows:
            best = min(rows, key=lambda r: float(r["val_mae"]))
            lines.append(
                f"\ntraining: {len(rows)} epochs, final train MAE "
                f"{rows[-1]['train_mae']}, best val MAE {best['val_mae']} "
                f"at epoch {best['epoch']}"
            )
    ev = out / "eval.csv"
    if ev.exists():
        for ln in ev.read_text().splitlines():
            if ln.startswith(("P50", "P75", "P90")):
                lines.append("eval " + ln.replace(",", " = "))
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text)
    return [log if log.exists() else out]


# ---------------------------------------------------------------------------
# entry point

_STAGE_FUNCS = {
    "synth": stage_synth,
    "preprocess": stage_preprocess,
    "train": stage_train,
    "forecast": stage_forecast,
    "fit-logistic": stage_fit_logistic,
    "tucker-fit": stage_tucker_fit,
    "predict-k": stage_predict_k,
    "cluster": stage_cluster,
    "eval": stage_eval,
    "report": stage_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regrow",
        description="Post-fire vegetation recovery forecasting pipeline",
    )
    parser.add_argument("stage", choices=STAGES, help="pipeline stage to run")
    parser.add_argument("--config", required=True, help="flat key=value run config")
    parser.add_argument("--out", required=True, help="output directory shared by all stages")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument(
        "--scope",
        choices=["holdout", "all"],
        default="holdout",
        help="eval scope (eval stage only)",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if isinstance(e, OSError) else 1
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out)
    t0 = time.time()
    try:
        with _output_lock(out):
            func = _STAGE_FUNCS[args.stage]
            if args.stage == "eval":
                inputs = func(cfg, out, seed, scope=args.scope)
            else:
                inputs = func(cfg, out, seed)
            _manifest(out, args.stage, _hash_paths(inputs), _config_hash(cfg, seed), t0)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
