"""CSV and SVG output for experiment histories."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .metrics import reports_to_csv

SELECTION_COLUMNS = ["iteration", "class", "accepted_unique", "above_threshold", "repetitions",
                     "id_threshold", "ood_threshold", "final_threshold"]


def selection_rows(t: int, sel) -> list:
    th = sel.thresholds
    return [[t, c, int(sel.accepted[c]), int(sel.above_threshold[c]), int(sel.repetitions[c]),
             repr(float(th.id[c])), repr(float(th.ood[c])), repr(float(th.final[c]))]
            for c in range(sel.accepted.shape[0])]


def selection_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SELECTION_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


def svg_line_plot(xs, series: dict, title: str, ylabel: str, width=480, height=320) -> str:
    """Self-contained SVG with one polyline per series; no external fonts or scripts."""
    xs = np.asarray(xs, dtype=float)
    left, right, top, bottom = 60, 20, 30, 40
    ys_all = np.concatenate([np.asarray(v, dtype=float) for v in series.values()]) if series else np.zeros(1)
    ys_all = ys_all[np.isfinite(ys_all)]
    ylo, yhi = (float(ys_all.min()), float(ys_all.max())) if ys_all.size else (0.0, 1.0)
    if yhi - ylo < 1e-12:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    xlo, xhi = float(xs.min()), float(xs.max())
    if xhi - xlo < 1e-12:
        xlo, xhi = xlo - 0.5, xhi + 0.5
    pw, ph = width - left - right, height - top - bottom
    sx = lambda x: left + (x - xlo) / (xhi - xlo) * pw
    sy = lambda y: top + (1 - (y - ylo) / (yhi - ylo)) * ph
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="18" text-anchor="middle" font-family="sans-serif" '
           f'font-size="13">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for x in xs:
        out.append(f'<text x="{sx(x):.2f}" y="{top + ph + 16}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{x:g}</text>')
    for y in (ylo, (ylo + yhi) / 2, yhi):
        out.append(f'<text x="{left - 6}" y="{sy(y) + 4:.2f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11">{y:.4g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 6}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12">iteration</text>')
    out.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12" transform="rotate(-90 14 {top + ph / 2})">{escape(ylabel)}</text>')
    for i, (name, ys) in enumerate(series.items()):
        col = colors[i % len(colors)]
        pts = [(sx(x), sy(y)) for x, y in zip(xs, np.asarray(ys, dtype=float)) if np.isfinite(y)]
        if len(pts) > 1:
            out.append(f'<polyline fill="none" stroke="{col}" stroke-width="2" points="'
                       + " ".join(f"{a:.2f},{b:.2f}" for a, b in pts) + '"/>')
        for a, b in pts:
            out.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="{col}"/>')
        out.append(f'<text x="{left + 8}" y="{top + 14 + 14 * i}" font-family="sans-serif" '
                   f'font-size="11" fill="{col}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(history, out_dir, selection_table: list | None = None) -> dict:
    """Write metrics.csv, selection.csv and three SVG plots; returns the paths."""
    if not history:
        raise ValueError("cannot report an empty history")
    out = Path(out_dir)
    paths = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths["metrics"] = out / "metrics.csv"
        paths["metrics"].write_text(reports_to_csv(history))
        if selection_table is not None:
            paths["selection"] = out / "selection.csv"
            paths["selection"].write_text(selection_csv(selection_table))
        xs = [r.iteration for r in history]
        plots = {
            "test_error": ("test error", {"test error": [r.test_error for r in history]}),
            "auroc": ("OOD AUROC", {"AUROC": [r.auroc for r in history]}),
        }
        rows = [r.accepted for r in history if r.accepted is not None]
        if rows:
            K = len(rows[0])
            acc = {f"class {c}": [np.nan if r.accepted is None else r.accepted[c] for r in history]
                   for c in range(K)}
            plots["accepted"] = ("accepted unique samples", acc)
        for key, (label, series) in plots.items():
            p = out / f"{key}.svg"
            p.write_text(svg_line_plot(xs, series, label + " vs iteration", label))
            paths[key + "_svg"] = p
    except OSError as exc:
        raise OSError(f"failed writing report to {out}: {exc}") from exc
    return paths
