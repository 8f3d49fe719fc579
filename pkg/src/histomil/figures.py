"""Figure data bundles: per-stratum Kaplan-Meier CSVs, td-AUC tables and plain SVG plots."""

from __future__ import annotations

import csv
import math
import re
from pathlib import Path

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
WIDTH, HEIGHT = 480, 320
MARGIN = 48


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", str(text)).strip("_") or "all"


def km_rows(curve, stratum="all", group="all"):
    """Step-function rows for one curve: a baseline row at time 0 then one per event time."""
    rows = [(stratum, group, 0.0, 1.0, int(curve.at_risk[0]) if len(curve.at_risk) else 0, 0)]
    for t, s, n, d in zip(curve.times, curve.survival, curve.at_risk, curve.events):
        rows.append((stratum, group, float(t), float(s), int(n), int(d)))
    return rows


class _Svg:
    def __init__(self, title, xlabel, ylabel, xmax, ymin=0.0, ymax=1.0):
        self.xmax = xmax if xmax > 0 else 1.0
        self.ymin, self.ymax = ymin, ymax
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            '<rect x="0" y="0" width="100%" height="100%" fill="white"/>',
            f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
            f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle" font-size="11">{_esc(xlabel)}</text>',
            f'<text x="12" y="{HEIGHT / 2:.1f}" text-anchor="middle" font-size="11" '
            f'transform="rotate(-90 12 {HEIGHT / 2:.1f})">{_esc(ylabel)}</text>',
        ]
        x0, y0 = self.px(0, ymin)
        x1, y1 = self.px(self.xmax, ymax)
        self.parts.append(f'<path d="M{x0:.2f},{y1:.2f} L{x0:.2f},{y0:.2f} L{x1:.2f},{y0:.2f}" '
                          'stroke="black" fill="none"/>')
        for frac in (0.0, 0.5, 1.0):
            xv = frac * self.xmax
            xp, _ = self.px(xv, ymin)
            self.parts.append(f'<text x="{xp:.2f}" y="{y0 + 14:.2f}" text-anchor="middle" '
                              f'font-size="10">{xv:.4g}</text>')
            yv = ymin + frac * (ymax - ymin)
            _, yp = self.px(0, yv)
            self.parts.append(f'<text x="{x0 - 4:.2f}" y="{yp + 3:.2f}" text-anchor="end" '
                              f'font-size="10">{yv:.4g}</text>')
        self.n_series = 0

    def px(self, x, y):
        w = WIDTH - 2 * MARGIN
        h = HEIGHT - 2 * MARGIN
        return (MARGIN + w * x / self.xmax,
                HEIGHT - MARGIN - h * (y - self.ymin) / (self.ymax - self.ymin))

    def series(self, points, label, step=False):
        colour = PALETTE[self.n_series % len(PALETTE)]
        cmds = []
        prev_y = None
        for i, (x, y) in enumerate(points):
            if y is None or (isinstance(y, float) and math.isnan(y)):
                prev_y = None
                continue
            xp, yp = self.px(x, y)
            if prev_y is None:
                cmds.append(f"M{xp:.2f},{yp:.2f}")
            elif step:
                cmds.append(f"L{xp:.2f},{prev_y:.2f} L{xp:.2f},{yp:.2f}")
            else:
                cmds.append(f"L{xp:.2f},{yp:.2f}")
            prev_y = yp
        if cmds:
            self.parts.append(f'<path d="{" ".join(cmds)}" stroke="{colour}" fill="none" stroke-width="1.5"/>')
        ly = MARGIN + 14 * self.n_series
        self.parts.append(f'<text x="{WIDTH - MARGIN:.2f}" y="{ly:.2f}" text-anchor="end" '
                          f'font-size="10" fill="{colour}">{_esc(label)}</text>')
        self.n_series += 1

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _esc(text) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_figures_data(results_dir, out_dir=None) -> list[Path]:
    """Split ``km.csv`` per stratum, tabulate ``td_auc.csv`` and draw SVGs for both.

    Inputs are the survival-stage outputs in ``results_dir``; the bundle goes to
    ``out_dir`` (default ``results_dir/figures``). Returns the written paths.
    """
    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir else results_dir / "figures"
    km_path = results_dir / "km.csv"
    auc_path = results_dir / "td_auc.csv"
    for p in (km_path, auc_path):
        if not p.exists():
            raise FileNotFoundError(f"missing survival output {p}")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    km = _read(km_path)
    strata: dict[str, dict[str, list]] = {}
    for r in km:
        strata.setdefault(r["stratum"], {}).setdefault(r["group"], []).append(r)
    for stratum, groups in sorted(strata.items()):
        slug = _slug(stratum)
        csv_path = out_dir / f"km_{slug}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group", "time", "survival", "at_risk", "events"])
            for g, rows in sorted(groups.items()):
                for r in rows:
                    w.writerow([g, r["time"], r["survival"], r["at_risk"], r["events"]])
        written.append(csv_path)
        xmax = max(float(r["time"]) for rows in groups.values() for r in rows)
        svg = _Svg(f"Kaplan-Meier: {stratum}", "time (months)", "survival", xmax)
        for g, rows in sorted(groups.items()):
            svg.series([(float(r["time"]), float(r["survival"])) for r in rows], g, step=True)
        svg_path = out_dir / f"km_{slug}.svg"
        svg_path.write_text(svg.render())
        written.append(svg_path)

    auc = _read(auc_path)
    table_path = out_dir / "td_auc.csv"
    with open(table_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["marker", "time", "auc"])
        for r in auc:
            w.writerow([r["marker"], r["time"], r["auc"]])
    written.append(table_path)
    xmax = max((float(r["time"]) for r in auc), default=1.0)
    svg = _Svg("Time-dependent AUC", "time (months)", "AUC", xmax)
    markers: dict[str, list] = {}
    for r in auc:
        markers.setdefault(r["marker"], []).append((float(r["time"]), float(r["auc"])))
    for m, pts in markers.items():
        svg.series(sorted(pts), m)
    svg_path = out_dir / "td_auc.svg"
    svg_path.write_text(svg.render())
    written.append(svg_path)
    return written
