"""Tile a synthetic slide, fit a stain profile and normalize toward a reference.

Run: python3 demos/tiling_and_stain.py
"""

import numpy as np

from histomil.stain import REFERENCE_STAIN_MATRIX, StainProfile, fit_stain_profile, normalize_to
from histomil.synthetic import render_tissue
from histomil.tiling import SlideImage, TileSpec, extract_tiles_report, grid_count

# %% a 1024 px slide whose right quarter is blank glass; od_noise=0 keeps every
# pixel an exact two-stain mixture, so self-normalization is near lossless
rng = np.random.default_rng(0)
rgb, _ = render_tissue(rng, (1024, 1024), od_noise=0.0)
rgb[:, 768:] = 255
slide = SlideImage("demo", rgb)

# %% 256 px windows, stride 256, resized to 64 px; blank windows are dropped
spec = TileSpec(tile_px=256, stride_px=256, output_px=64)
report = extract_tiles_report(slide, spec, threads=1)
print("planned", report.n_planned, "== floor formula", grid_count(1024, 1024, 256, 256))
print("kept", len(report.tiles), "background", report.n_background)

# %% sparse NMF stain fit on the pooled tiles
tiles = np.stack([t.pixels for t in report.tiles])
profile = fit_stain_profile(tiles)
print("fitted stain matrix (columns H, E):\n", np.round(profile.stain_matrix, 3))
print("reference:\n", np.round(REFERENCE_STAIN_MATRIX, 3))

# %% self-normalization is close to the identity; toward a different target it recolours
same = normalize_to(tiles, profile, profile)
print("self-normalization max residual:", int(np.abs(same.astype(int) - tiles).max()))
target = StainProfile(REFERENCE_STAIN_MATRIX[:, ::-1].copy(), profile.max_concentration)
swapped = normalize_to(tiles, profile, target)
print("mean RGB before", tiles.reshape(-1, 3).mean(0).round(1), "after stain swap",
      swapped.reshape(-1, 3).mean(0).round(1))
