"""Absolute-k-error evaluation: quantiles, histogram, CSV and SVG rendering."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

HIST_BIN_WIDTH = 0.06
HIST_RANGE = (0.0, 1.2)
REFERENCE_QUANTILES = (0.12, 0.24, 0.48)   # P50/P75/P90 display thresholds


@dataclass
class EvalReport:
    fire_ids: list[str]
    errors: np.ndarray
    p50: float
    p75: float
    p90: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    n_overflow: int


def eval_k_errors(predicted: dict[str, float], baseline: dict[str, float]) -> EvalReport:
    """Per-fire |k_hat - k_fit| with linearly interpolated quantiles.

    ``predicted`` and ``baseline`` map fire ids to k values; fires present
    in both are evaluated, and a fire missing a baseline is an error.
    """
    ids = sorted(predicted)
    missing = [f for f in ids if f not in baseline]
    if missing:
        raise KeyError(f"fires without a baseline fit: {missing}")
    errors = np.array([abs(predicted[f] - baseline[f]) for f in ids])
    if errors.size == 0:
        raise ValueError("nothing to evaluate")
    p50, p75, p90 = (float(np.percentile(errors, q)) for q in (50, 75, 90))
    n_bins = int(round((HIST_RANGE[1] - HIST_RANGE[0]) / HIST_BIN_WIDTH))
    counts, edges = np.histogram(errors, bins=n_bins, range=HIST_RANGE)
    return EvalReport(
        fire_ids=ids,
        errors=errors,
        p50=p50,
        p75=p75,
        p90=p90,
        hist_counts=counts,
        hist_edges=edges,
        n_overflow=int((errors > HIST_RANGE[1]).sum()),
    )


def write_eval_csv(report: EvalReport, predicted, baseline, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["fire_id", "k_hat", "k_fit", "abs_error"])
        for fid, err in zip(report.fire_ids, report.errors):
            writer.writerow(
                [fid, f"{predicted[fid]:.6f}", f"{baseline[fid]:.6f}", f"{err:.6f}"]
            )
        writer.writerow([])
        writer.writerow(["quantile", "value"])
        for name, v in (("P50", report.p50), ("P75", report.p75), ("P90", report.p90)):
            writer.writerow([name, f"{v:.6f}"])


def write_histogram_svg(report: EvalReport, path, width: int = 520, height: int = 360) -> None:
    """Error histogram with the reference thresholds drawn as dashed lines."""
    counts = report.hist_counts
    edges = report.hist_edges
    peak = max(int(counts.max()), 1)
    m = 40  # margin
    plot_w, plot_h = width - 2 * m, height - 2 * m
    bar_w = plot_w / len(counts)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
    ]
    for i, c in enumerate(counts):
        h = plot_h * c / peak
        x = m + i * bar_w
        y = height - m - h
        lines.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w * 0.9:.2f}" height="{h:.2f}" '
            f'fill="#4878a8"/>'
        )
    span = edges[-1] - edges[0]
    for thr in REFERENCE_QUANTILES:
        x = m + plot_w * (thr - edges[0]) / span
        lines.append(
            f'<line x1="{x:.2f}" y1="{m}" x2="{x:.2f}" y2="{height - m}" '
            f'stroke="#c03030" stroke-dasharray="4,3"/>'
        )
        lines.append(
            f'<text x="{x + 2:.2f}" y="{m + 12}" font-size="10" fill="#c03030">{thr}</text>'
        )
    for i in range(0, len(counts) + 1, 5):
        x = m + i * bar_w
        lines.append(
            f'<text x="{x:.2f}" y="{height - m + 14}" font-size="10" '
            f'text-anchor="middle">{edges[0] + i * HIST_BIN_WIDTH:.2f}</text>'
        )
    lines.append(
        f'<text x="{m}" y="{m - 8}" font-size="11">per-fire |k error| '
        f"(P50={report.p50:.3f}, P75={report.p75:.3f}, P90={report.p90:.3f})</text>"
    )
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
