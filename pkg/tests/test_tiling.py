import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histomil.tiling import (SlideImage, TileSpec, extract_tiles, extract_tiles_report, grid_count,
                             is_tissue, plan_grid, resize_area, tissue_fraction)


def brute_force_count(w, h, tile, stride):
    xs = [x for x in range(0, w) if x + tile <= w and x % stride == 0]
    ys = [y for y in range(0, h) if y + tile <= h and y % stride == 0]
    return len(xs) * len(ys)


@given(st.integers(1, 700), st.integers(1, 700), st.integers(1, 256), st.integers(1, 256))
@settings(max_examples=200, deadline=None)
def test_grid_count_matches_enumeration(w, h, tile, stride):
    assert grid_count(w, h, tile, stride) == brute_force_count(w, h, tile, stride)


def test_plan_grid_is_row_major_and_drops_partial_tiles():
    slide = SlideImage("s", np.zeros((300, 520, 3), np.uint8))
    plan = plan_grid(slide, TileSpec(tile_px=128, stride_px=128, output_px=64))
    assert [(r, c) for r, c, _, _ in plan] == [(r, c) for r in range(2) for c in range(4)]
    assert plan[5][2:] == (128, 128)
    assert all(x + 128 <= 520 and y + 128 <= 300 for _, _, x, y in plan)


def test_overlapping_stride():
    slide = SlideImage("s", np.zeros((256, 256, 3), np.uint8))
    assert len(plan_grid(slide, TileSpec(128, 64, 64))) == 9


def test_tile_spec_validation():
    with pytest.raises(ValueError):
        TileSpec(tile_px=0)
    with pytest.raises(ValueError):
        TileSpec(stride_px=-1)
    with pytest.raises(ValueError):
        TileSpec(tissue_threshold=1.5)


def test_slide_validation():
    with pytest.raises(ValueError):
        SlideImage("s", np.zeros((10, 10), np.uint8))
    with pytest.raises(ValueError):
        SlideImage("s", np.zeros((10, 10, 3), np.uint8), microns_per_pixel=0)


def test_tissue_fraction_white_and_dark():
    white = np.full((32, 32, 3), 255, np.uint8)
    assert tissue_fraction(white) == 0.0
    assert not is_tissue(white, 0.5)
    dark = np.full((32, 32, 3), 40, np.uint8)
    assert tissue_fraction(dark) == 1.0
    # pale but saturated pink counts as tissue
    pink = np.zeros((32, 32, 3), np.uint8) + np.array([250, 200, 230], np.uint8)
    assert tissue_fraction(pink) == 1.0


def test_tissue_threshold_is_inclusive():
    w = np.full((10, 10, 3), 255, np.uint8)
    w[:5] = 30
    assert tissue_fraction(w) == 0.5
    assert is_tissue(w, 0.5)
    assert not is_tissue(w, 0.51)


def test_resize_area_block_means():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
    out = resize_area(x, 4)
    expect = np.rint(x.astype(float).reshape(4, 2, 4, 2, 3).mean(axis=(1, 3)))
    assert out.dtype == np.uint8
    np.testing.assert_array_equal(out, expect)


def test_resize_area_preserves_constant_and_handles_non_integer_ratio():
    x = np.full((512, 512, 3), 77, np.uint8)
    np.testing.assert_array_equal(resize_area(x, 224), 77)
    ramp = np.tile(np.arange(512, dtype=np.float64)[None, :, None] / 2, (512, 1, 3)).astype(np.uint8)
    out = resize_area(ramp, 224).astype(int)
    assert np.all(np.diff(out[0, :, 0]) >= 0)


def _striped_slide():
    rng = np.random.default_rng(1)
    px = rng.integers(60, 200, (600, 900, 3)).astype(np.uint8)
    px[:, 512:] = 255
    return SlideImage("slideA", px)


def test_extract_tiles_filters_background_and_names_tiles():
    res = extract_tiles_report(_striped_slide(), TileSpec(256, 256, 64), threads=1)
    assert res.n_planned == 6
    assert res.n_background == 2
    assert [t.stem for t in res.tiles] == ["slideA_0_0", "slideA_0_1", "slideA_1_0", "slideA_1_1"]
    assert all(t.pixels.shape == (64, 64, 3) for t in res.tiles)
    assert res.errors == []


def test_extraction_is_identical_across_thread_counts():
    a = extract_tiles(_striped_slide(), TileSpec(256, 128, 64), threads=1)
    b = extract_tiles(_striped_slide(), TileSpec(256, 128, 64), threads=4)
    assert [t.stem for t in a] == [t.stem for t in b]
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))


class _FlakyPixels:
    """Array wrapper whose reads fail inside one region."""

    def __init__(self, arr):
        self.arr = arr
        self.shape = arr.shape
        self.ndim = arr.ndim
        self.dtype = arr.dtype

    def __getitem__(self, key):
        ys, xs = key
        if ys.start == 0 and xs.start == 256:
            raise OSError("corrupt region")
        return self.arr[key]


def test_unreadable_region_is_reported_not_fatal():
    slide = _striped_slide()
    slide.pixels = _FlakyPixels(slide.pixels)
    res = extract_tiles_report(slide, TileSpec(256, 256, 64), threads=1)
    assert res.errors == [(0, 1, "corrupt region")]
    assert len(res.tiles) == 3
