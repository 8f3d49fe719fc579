"""Cropping large histology rasters into fixed-size, resized tiles."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from histomil._parallel import ordered_map

log = logging.getLogger(__name__)

# saturation / luminance cut-offs on the [0, 1] scale
SATURATION_CUT = 0.05
LUMINANCE_CUT = 0.85


@dataclass
class SlideImage:
    id: str
    pixels: Any  # (height, width, 3) uint8; anything supporting numpy slicing
    microns_per_pixel: float = 0.25

    def __post_init__(self):
        if self.microns_per_pixel <= 0:
            raise ValueError("microns_per_pixel must be positive")
        shape = self.pixels.shape
        if len(shape) != 3 or shape[2] != 3:
            raise ValueError(f"slide {self.id!r}: expected an RGB raster, got shape {shape}")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(frozen=True)
class TileSpec:
    tile_px: int = 512
    stride_px: int = 512
    output_px: int = 224
    tissue_threshold: float = 0.5

    def __post_init__(self):
        if self.tile_px <= 0 or self.stride_px <= 0:
            raise ValueError("tile_px and stride_px must be positive")
        if not 0 < self.output_px <= self.tile_px:
            raise ValueError("output_px must lie in (0, tile_px]")
        if not 0.0 <= self.tissue_threshold <= 1.0:
            raise ValueError("tissue_threshold must lie in [0, 1]")


@dataclass
class TileRGB:
    slide_id: str
    grid_row: int
    grid_col: int
    origin_x: int
    origin_y: int
    pixels: np.ndarray  # (output_px, output_px, 3) uint8

    @property
    def stem(self) -> str:
        return f"{self.slide_id}_{self.grid_row}_{self.grid_col}"


@dataclass
class TilingResult:
    tiles: list[TileRGB]
    n_planned: int
    n_background: int
    errors: list[tuple[int, int, str]] = field(default_factory=list)


def grid_count(width: int, height: int, tile_px: int, stride_px: int) -> int:
    """Closed-form number of full windows that fit in a ``width x height`` raster."""
    if width < tile_px or height < tile_px:
        return 0
    return ((width - tile_px) // stride_px + 1) * ((height - tile_px) // stride_px + 1)


def plan_grid(slide: SlideImage, spec: TileSpec) -> list[tuple[int, int, int, int]]:
    """Return ``(grid_row, grid_col, origin_x, origin_y)`` for every full window, row-major.

    Windows that would run past the right or bottom edge are dropped rather than
    padded, so a slide smaller than one tile yields an empty plan.
    """
    if slide.width < spec.tile_px or slide.height < spec.tile_px:
        return []
    xs = range(0, slide.width - spec.tile_px + 1, spec.stride_px)
    ys = range(0, slide.height - spec.tile_px + 1, spec.stride_px)
    return [(r, c, x, y) for r, y in enumerate(ys) for c, x in enumerate(xs)]


def tissue_fraction(window: np.ndarray) -> float:
    rgb = np.asarray(window, dtype=np.float64) / 255.0
    hi = rgb.max(axis=-1)
    lo = rgb.min(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        saturation = np.where(hi > 0, (hi - lo) / hi, 0.0)
    luminance = rgb @ np.array([0.299, 0.587, 0.114])
    tissue = (saturation > SATURATION_CUT) | (luminance < LUMINANCE_CUT)
    return float(tissue.mean())


def is_tissue(window: np.ndarray, threshold: float) -> bool:
    """True when the share of saturated or dark pixels reaches ``threshold``."""
    return tissue_fraction(window) >= threshold


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    # row i holds the overlap of output cell i with every input pixel, normalised
    scale = n_in / n_out
    edges = np.arange(n_out + 1) * scale
    lo, hi = edges[:-1, None], edges[1:, None]
    pix = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, pix + 1) - np.maximum(lo, pix), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


_WEIGHT_CACHE: dict[tuple[int, int], np.ndarray] = {}


def resize_area(window: np.ndarray, output_px: int) -> np.ndarray:
    """Box-filter resize of a square uint8 raster to ``output_px`` on a side."""
    n_in = window.shape[0]
    if window.shape[1] != n_in:
        raise ValueError("resize_area expects a square window")
    if n_in == output_px:
        return np.array(window, dtype=np.uint8, copy=True)
    key = (n_in, output_px)
    if key not in _WEIGHT_CACHE:
        _WEIGHT_CACHE[key] = _area_weights(n_in, output_px)
    R = _WEIGHT_CACHE[key]
    data = np.asarray(window, dtype=np.float64)
    out = np.einsum("ij,jkc,lk->ilc", R, data, R, optimize=True)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def extract_tiles_report(slide: SlideImage, spec: TileSpec, threads: int | None = None) -> TilingResult:
    """Crop, filter and resize every planned window, keeping per-tile failures."""
    plan = plan_grid(slide, spec)

    def work(pos):
        r, c, x, y = pos
        try:
            window = np.asarray(slide.pixels[y:y + spec.tile_px, x:x + spec.tile_px])
            if window.shape != (spec.tile_px, spec.tile_px, 3):
                raise ValueError(f"window read returned shape {window.shape}")
        except Exception as exc:  # unreadable raster region
            return ("error", (r, c, str(exc)))
        if not is_tissue(window, spec.tissue_threshold):
            return ("background", None)
        return ("tile", TileRGB(slide.id, r, c, x, y, resize_area(window, spec.output_px)))

    result = TilingResult(tiles=[], n_planned=len(plan), n_background=0)
    for kind, value in ordered_map(work, plan, threads=threads):
        if kind == "tile":
            result.tiles.append(value)
        elif kind == "background":
            result.n_background += 1
        else:
            log.warning("slide %s tile %s,%s failed: %s", slide.id, *value)
            result.errors.append(value)
    return result


def extract_tiles(slide: SlideImage, spec: TileSpec, threads: int | None = None) -> list[TileRGB]:
    return extract_tiles_report(slide, spec, threads=threads).tiles
