"""File formats: slide manifests, tile directories, bag labels, score tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from histomil.mil.objective import ScoredBag
from histomil.tiling import SlideImage, TileRGB

TILE_INDEX = "index.csv"
INDEX_FIELDS = ["slide_id", "row", "col", "origin_x", "origin_y", "path"]


def read_manifest(path) -> list[dict]:
    """Slide manifest: JSON list of ``{"id", "path", "microns_per_pixel"}``; paths resolve
    relative to the manifest file."""
    path = Path(path)
    entries = json.loads(path.read_text())
    out = []
    for e in entries:
        p = Path(e["path"])
        out.append({"id": str(e["id"]),
                    "path": p if p.is_absolute() else path.parent / p,
                    "microns_per_pixel": float(e.get("microns_per_pixel", 0.25))})
    return out


def load_slide(entry: dict) -> SlideImage:
    with Image.open(entry["path"]) as im:
        pixels = np.asarray(im.convert("RGB"))
    return SlideImage(entry["id"], pixels, entry["microns_per_pixel"])


def read_png_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_png_rgb(path, pixels) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path)


def write_tiles(tiles: list[TileRGB], out_dir) -> list[dict]:
    """Write ``{slide_id}_{row}_{col}.png`` files; returns the index rows (not yet saved)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for t in tiles:
        name = f"{t.stem}.png"
        write_png_rgb(out_dir / name, t.pixels)
        rows.append({"slide_id": t.slide_id, "row": t.grid_row, "col": t.grid_col,
                     "origin_x": t.origin_x, "origin_y": t.origin_y, "path": name})
    return rows


def write_tile_index(out_dir, rows) -> Path:
    path = Path(out_dir) / TILE_INDEX
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=INDEX_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in sorted(rows, key=lambda r: (r["slide_id"], int(r["row"]), int(r["col"]))):
            w.writerow(r)
    return path


def read_tile_index(tile_dir) -> list[dict]:
    with open(Path(tile_dir) / TILE_INDEX, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("row", "col", "origin_x", "origin_y"):
            r[k] = int(r[k])
    return rows


def heatmap_name(stem: str) -> str:
    return f"{stem}_hm.png"


def read_bag_labels(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        return {row["slide_id"]: int(row["label"]) for row in csv.DictReader(fh)}


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def tile_scores_path(scores_path) -> Path:
    p = Path(scores_path)
    return p.with_name(p.stem + "_tiles" + p.suffix)


def write_scores(path, scored: list[ScoredBag]) -> tuple[Path, Path]:
    """Bag table ``slide_id,aggregate_S,sigmoid_s,risk_class`` plus the per-tile table."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "aggregate_S", "sigmoid_s", "risk_class"])
        for b in sorted(scored, key=lambda b: b.slide_id):
            w.writerow([b.slide_id, _fmt(b.aggregate_S), _fmt(b.sigmoid_s), b.risk_class])
    tiles_path = tile_scores_path(path)
    with open(tiles_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "row", "col", "score"])
        for b in sorted(scored, key=lambda b: b.slide_id):
            for (r, c), s in sorted(zip(b.coords, b.per_tile_scores)):
                w.writerow([b.slide_id, r, c, _fmt(s)])
    return path, tiles_path


def read_bag_scores(path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        return {row["slide_id"]: {"aggregate_S": float(row["aggregate_S"]),
                                  "sigmoid_s": float(row["sigmoid_s"]),
                                  "risk_class": row["risk_class"]}
                for row in csv.DictReader(fh)}


def read_tile_scores(path) -> list[ScoredBag]:
    """Rebuild per-slide scored bags (tile scores and provenance only) from a per-tile table."""
    groups: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault(row["slide_id"], []).append(
                (int(row["row"]), int(row["col"]), float(row["score"])))
    out = []
    for sid, rows in sorted(groups.items()):
        out.append(ScoredBag(sid, np.array([r[2] for r in rows]), [(r[0], r[1]) for r in rows],
                             float("nan"), float("nan"), float("nan"), ""))
    return out


def write_csv(path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) if isinstance(x, (float, np.floating)) else x for x in r])
    return Path(path)
