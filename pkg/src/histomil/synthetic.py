"""Seeded synthetic slides, tiles and survival cohorts for desk-scale verification.

Background tissue is an eosin-dominated texture with sparse small nuclei.
Witness regions carry dense clusters of large, dark hematoxylin blobs, standing
in for nuclear hyperchromasia. Survival times are exponential with a hazard
ratio between label-1 and label-0 patients, plus independent censoring.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from histomil.mil.scorer import Bag, Tile4C, tile_features
from histomil.stain import REFERENCE_STAIN_MATRIX, od_to_rgb
from histomil.tiling import resize_area


def _disks(shape, centers, radii):
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    mask = np.zeros(shape, dtype=bool)
    for (cy, cx), r in zip(centers, radii):
        y0, y1 = max(int(cy - r), 0), min(int(cy + r) + 2, shape[0])
        x0, x1 = max(int(cx - r), 0), min(int(cx + r) + 2, shape[1])
        if y0 >= y1 or x0 >= x1:
            continue
        sub = (yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2 <= r * r
        mask[y0:y1, x0:x1] |= sub
    return mask


def _smooth_noise(rng, shape, scale):
    coarse = rng.random((shape[0] // scale + 2, shape[1] // scale + 2))
    up = np.kron(coarse, np.ones((scale, scale)))
    return up[:shape[0], :shape[1]]


def render_tissue(rng, shape, witness_mask=None, stain_matrix=REFERENCE_STAIN_MATRIX, od_noise=0.02):
    """Render an H&E-like RGB raster and its nucleus mask.

    ``witness_mask`` marks regions that receive clustered dark nuclei.
    ``od_noise`` is the per-channel Gaussian OD noise; it leaves the stain
    plane, so with ``od_noise=0`` every pixel is an exact two-stain mixture
    up to 8-bit rounding.
    """
    h, w = shape
    eosin = 0.25 + 0.35 * _smooth_noise(rng, shape, 16)
    hema = 0.05 * _smooth_noise(rng, shape, 8)

    n_small = max(1, int(h * w / 900))
    centers = rng.random((n_small, 2)) * [h, w]
    nuclei = _disks(shape, centers, rng.uniform(2.0, 4.0, n_small))

    if witness_mask is not None and witness_mask.any():
        ys, xs = np.nonzero(witness_mask)
        n_big = max(1, int(witness_mask.sum() / 180))
        pick = rng.integers(0, ys.size, n_big)
        big = _disks(shape, np.stack([ys[pick], xs[pick]], axis=1), rng.uniform(5.0, 9.0, n_big))
        big &= witness_mask
        hema = np.where(big, 1.6 + 0.3 * rng.random(shape), hema)
        nuclei |= big
    hema = np.where(nuclei & (hema < 0.5), 0.8 + 0.2 * rng.random(shape), hema)

    conc = np.stack([hema, eosin])
    od = np.tensordot(stain_matrix, conc, axes=(1, 0)).transpose(1, 2, 0)
    rgb = od_to_rgb(od + od_noise * rng.standard_normal(od.shape) if od_noise else od)
    return rgb, nuclei


def synthetic_tile(rng, witness: bool, size: int = 224, od_noise: float = 0.02):
    """One tile as ``(rgb uint8, nucleus mask)``; witness tiles are dense in dark blobs."""
    mask = None
    if witness:
        # one or two blob clusters covering a good part of the tile
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(rng.integers(1, 3)):
            c = rng.random(2) * size
            mask |= _disks(mask.shape, [c], [size * rng.uniform(0.3, 0.5)])
    return render_tissue(rng, (size, size), mask, od_noise=od_noise)


def heatmap_from_mask(mask) -> np.ndarray:
    return np.clip(ndimage.uniform_filter(mask.astype(np.float64), size=3, mode="nearest"), 0, 1)


def synthetic_bags(n_bags=200, tiles_per_bag=30, witness_fraction=0.2, seed=17, size=224,
                   keep_tiles=False) -> list[Bag]:
    """Labelled bags of 4-channel tiles; a label-1 bag holds ``witness_fraction`` witness tiles.

    Labels alternate 0/1 before a seeded shuffle, so classes are balanced. The
    heatmap channel is a smoothed ground-truth nucleus mask. Features are
    computed eagerly; raw tiles are kept only with ``keep_tiles``.
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_bags) % 2)
    n_witness = int(round(witness_fraction * tiles_per_bag))
    bags = []
    for i, label in enumerate(labels):
        slide_id = f"syn{i:04d}"
        witness = np.zeros(tiles_per_bag, dtype=bool)
        if label == 1 and n_witness:
            witness[rng.choice(tiles_per_bag, n_witness, replace=False)] = True
        tiles, feats = [], []
        for j in range(tiles_per_bag):
            rgb, mask = synthetic_tile(rng, bool(witness[j]), size)
            tile = Tile4C.from_uint8(rgb, heatmap_from_mask(mask), slide_id, j // 8, j % 8)
            feats.append(tile_features(tile))
            if keep_tiles:
                tiles.append(tile)
        bags.append(Bag(slide_id, int(label), tiles=tiles, features=np.stack(feats),
                        coords=[(j // 8, j % 8) for j in range(tiles_per_bag)]))
    return bags


def exponential_survival(rng, labels, base_hazard=1 / 40.0, hazard_ratio=3.0,
                         censor_hazard=1 / 80.0, max_follow_up=120.0):
    """Event times with hazard ``base_hazard * hazard_ratio**label`` and random censoring (months)."""
    labels = np.asarray(labels)
    rate = base_hazard * hazard_ratio ** labels
    event_t = rng.exponential(1.0 / rate)
    censor_t = np.minimum(rng.exponential(1.0 / censor_hazard, labels.size), max_follow_up)
    time = np.minimum(event_t, censor_t)
    event = (event_t <= censor_t).astype(int)
    return time, event


@dataclass
class SyntheticCohort:
    root: Path
    manifest: Path
    labels_csv: Path
    cohort_csv: Path
    truth_dir: Path  # slide masks; per-tile masks under truth_dir / "tiles"


def generate_synthetic_cohort(out_dir, n_slides=8, witness_fraction=0.2, seed=17,
                              slide_px=2048, tile_px=512, hazard_ratio=3.0, out_px=224) -> SyntheticCohort:
    """Write synthetic slides, nucleus masks, labels and a survival table under ``out_dir``.

    Slides are laid out on the ``tile_px`` grid; in label-1 slides a
    ``witness_fraction`` share of grid cells receives witness blob clusters.
    """
    if slide_px // tile_px < 2:
        raise ValueError("slide_px must span at least two tiles")
    if n_slides < 4:
        raise ValueError("n_slides must be at least 4")
    if not 0.0 <= witness_fraction < 1.0:
        raise ValueError("witness_fraction must lie in [0, 1)")
    root = Path(out_dir)
    (root / "slides").mkdir(parents=True, exist_ok=True)
    (root / "truth" / "tiles").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_slides) % 2)
    cells = slide_px // tile_px
    manifest = []
    for i, label in enumerate(labels):
        slide_id = f"S{i:03d}"
        witness_mask = np.zeros((slide_px, slide_px), dtype=bool)
        if label == 1 and witness_fraction > 0:
            # the last grid column is left blank, so witnesses go elsewhere
            usable = cells * (cells - 1)
            n_cells = max(1, int(round(witness_fraction * usable)))
            for k in rng.choice(usable, n_cells, replace=False):
                r, c = divmod(int(k), cells - 1)
                witness_mask[r * tile_px:(r + 1) * tile_px, c * tile_px:(c + 1) * tile_px] = True
        rgb, nuclei = render_tissue(rng, (slide_px, slide_px), witness_mask)
        # a blank strip exercises background filtering
        rgb[:, (cells - 1) * tile_px:] = 255
        nuclei[:, (cells - 1) * tile_px:] = False
        path = root / "slides" / f"{slide_id}.png"
        Image.fromarray(rgb).save(path)
        Image.fromarray((nuclei * 255).astype(np.uint8), mode="L").save(root / "truth" / f"{slide_id}_mask.png")
        # per-tile masks on the default grid, resized like the RGB tiles
        for r in range(cells):
            for c in range(cells):
                win = nuclei[r * tile_px:(r + 1) * tile_px, c * tile_px:(c + 1) * tile_px]
                small = resize_area(np.repeat(win[..., None] * 255, 3, axis=2).astype(np.uint8), out_px)[..., 0]
                Image.fromarray(np.where(small >= 128, 255, 0).astype(np.uint8), mode="L").save(
                    root / "truth" / "tiles" / f"{slide_id}_{r}_{c}_mask.png")
        manifest.append({"id": slide_id, "path": f"slides/{slide_id}.png", "microns_per_pixel": 0.25})

    manifest_path = root / "slides.json"
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")

    labels_csv = root / "bags.csv"
    with open(labels_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "label"])
        for m, label in zip(manifest, labels):
            w.writerow([m["id"], int(label)])

    time, event = exponential_survival(rng, labels, hazard_ratio=hazard_ratio)
    age = np.round(rng.normal(55, 10, n_slides), 1)
    afp = np.round(rng.lognormal(3.0, 1.5, n_slides), 1)
    stage = rng.choice(["I", "II", "III"], n_slides)
    cohort_csv = root / "cohort.csv"
    with open(cohort_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "time", "event", "age", "afp", "stage"])
        for m, t, e, a, f, s in zip(manifest, time, event, age, afp, stage):
            w.writerow([m["id"], f"{t:.4f}", int(e), a, f, s])
    return SyntheticCohort(root, manifest_path, labels_csv, cohort_csv, root / "truth")
