"""Four-channel tiles, bags, and the small reference tile scorer.

The scorer pools each channel globally and over an 8x8 grid of blocks
(4 + 4*64 = 260 features) and feeds the descriptor through a
260 -> 16 (tanh) -> 1 (linear) head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRID = 8
N_CHANNELS = 4


@dataclass
class Tile4C:
    rgb: np.ndarray  # (h, w, 3) floats in [0, 1], stain-normalised
    heatmap: np.ndarray  # (h, w) floats in [0, 1]
    slide_id: str = ""
    grid_row: int = 0
    grid_col: int = 0

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.heatmap = np.asarray(self.heatmap, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (h, w, 3), got {self.rgb.shape}")
        if self.heatmap.shape != self.rgb.shape[:2]:
            raise ValueError("heatmap and rgb are not spatially aligned")

    @classmethod
    def from_uint8(cls, rgb, heatmap, slide_id="", grid_row=0, grid_col=0) -> "Tile4C":
        return cls(np.asarray(rgb, dtype=np.float64) / 255.0, heatmap, slide_id, grid_row, grid_col)

    def stack(self) -> np.ndarray:
        """Channel-last (h, w, 4) array: normalised RGB then the heatmap."""
        return np.concatenate([self.rgb, self.heatmap[..., None]], axis=-1)

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.slide_id, self.grid_row, self.grid_col)


def tile_features(tile, grid: int = GRID) -> np.ndarray:
    """Global channel means followed by per-channel ``grid x grid`` block means."""
    x = tile.stack() if isinstance(tile, Tile4C) else np.asarray(tile, dtype=np.float64)
    h, w, c = x.shape
    if h % grid or w % grid:
        raise ValueError(f"tile size {h}x{w} is not divisible by the {grid}x{grid} grid")
    blocks = x.reshape(grid, h // grid, grid, w // grid, c).mean(axis=(1, 3))
    return np.concatenate([x.mean(axis=(0, 1)), blocks.transpose(2, 0, 1).ravel()])


@dataclass
class Bag:
    """Tiles of one slide sharing the slide-level label (1 = poor outcome)."""

    slide_id: str
    label: int
    tiles: list = field(default_factory=list)
    features: np.ndarray | None = None
    coords: list | None = None  # [(grid_row, grid_col), ...]

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("bag label must be 0 or 1")
        if self.tiles:
            if any(t.slide_id != self.slide_id for t in self.tiles):
                raise ValueError(f"bag {self.slide_id!r} holds tiles from another slide")
            if self.coords is None:
                self.coords = [(t.grid_row, t.grid_col) for t in self.tiles]
        if not self.tiles and self.features is None:
            raise ValueError(f"bag {self.slide_id!r} is empty")
        if self.features is not None:
            self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
            if self.coords is None:
                self.coords = [(i, 0) for i in range(len(self.features))]
        if len(self.coords) != len(self):
            raise ValueError("coords do not match the number of tiles")

    def __len__(self):
        return len(self.tiles) if self.tiles else len(self.features)

    def feature_matrix(self, grid: int = GRID) -> np.ndarray:
        if self.features is None:
            self.features = np.stack([tile_features(t, grid) for t in self.tiles])
        return self.features


@dataclass(frozen=True)
class ScorerArchitecture:
    n_features: int = N_CHANNELS * (1 + GRID * GRID)
    hidden: int = 16

    @property
    def size(self) -> int:
        return self.hidden * self.n_features + 2 * self.hidden + 1

    def as_dict(self):
        return {"n_features": self.n_features, "hidden": self.hidden}


class ScorerParams:
    """Flat parameter vector with views onto the two dense layers."""

    def __init__(self, values, arch: ScorerArchitecture = ScorerArchitecture()):
        values = np.array(values, dtype=np.float64).ravel()
        if values.size != arch.size:
            raise ValueError(f"expected {arch.size} parameters, got {values.size}")
        self.values = values
        self.arch = arch

    @classmethod
    def zeros(cls, arch: ScorerArchitecture = ScorerArchitecture()) -> "ScorerParams":
        return cls(np.zeros(arch.size), arch)

    @classmethod
    def initialize(cls, arch: ScorerArchitecture = ScorerArchitecture(), seed=0,
                   output_bias=0.0) -> "ScorerParams":
        """Glorot-uniform hidden weights and unit-variance output weights.

        ``output_bias`` sets the initial bag score; pass ``logit(t)`` to start
        every bag on the decision boundary.
        """
        rng = np.random.default_rng(seed)
        p = cls.zeros(arch)
        limit = np.sqrt(6.0 / (arch.n_features + arch.hidden))
        p.W1[...] = rng.uniform(-limit, limit, p.W1.shape)
        p.w2[...] = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), p.w2.shape)
        p.b2[...] = output_bias
        return p

    def copy(self) -> "ScorerParams":
        return ScorerParams(self.values.copy(), self.arch)

    @property
    def W1(self):
        a = self.arch
        return self.values[:a.hidden * a.n_features].reshape(a.hidden, a.n_features)

    @property
    def b1(self):
        a = self.arch
        start = a.hidden * a.n_features
        return self.values[start:start + a.hidden]

    @property
    def w2(self):
        a = self.arch
        start = a.hidden * a.n_features + a.hidden
        return self.values[start:start + a.hidden]

    @property
    def b2(self):
        return self.values[-1:]

    def check_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("scorer parameters contain non-finite values")


def forward(params: ScorerParams, features: np.ndarray):
    """Scores for a ``(n_tiles, n_features)`` matrix; also returns the hidden activations."""
    params.check_finite()
    hidden = np.tanh(features @ params.W1.T + params.b1)
    return hidden @ params.w2 + params.b2[0], hidden


def backward(params: ScorerParams, features, hidden, score_grad) -> np.ndarray:
    """Gradient of ``sum(score_grad * scores)`` with respect to the flat parameters."""
    grad = ScorerParams.zeros(params.arch)
    grad.w2[...] = score_grad @ hidden
    grad.b2[...] = score_grad.sum()
    dz = np.outer(score_grad, params.w2) * (1.0 - hidden ** 2)
    grad.W1[...] = dz.T @ features
    grad.b1[...] = dz.sum(axis=0)
    return grad.values


def score_tile(params: ScorerParams, tile) -> float:
    feats = tile_features(tile)[None, :]
    return float(forward(params, feats)[0][0])
