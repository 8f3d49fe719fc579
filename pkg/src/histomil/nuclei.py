"""Nuclei heatmap channel and the Dice overlap metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from histomil.stain import StainProfile, stain_concentrations


@dataclass(frozen=True)
class DiceConfig:
    epsilon: float = 1e-8
    # strict: both-empty inputs give the raw formula value (-1 loss); otherwise 0 loss
    strict_eq1: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    return pred, truth


def soft_dice(pred, truth, cfg: DiceConfig = DiceConfig()) -> float:
    """Smoothed overlap ``2 (sum p y + eps) / (sum p + sum y + eps)`` without thresholding."""
    pred, truth = _check_pair(pred, truth)
    inter = float(np.sum(pred * truth))
    total = float(np.sum(pred) + np.sum(truth))
    if not cfg.strict_eq1 and total == 0.0:
        return 1.0
    return 2.0 * (inter + cfg.epsilon) / (total + cfg.epsilon)


def dice_loss(pred, truth, cfg: DiceConfig = DiceConfig()) -> float:
    """``1 - soft_dice``; with both inputs empty this is -1 under the strict formula."""
    return 1.0 - soft_dice(pred, truth, cfg)


def dice_score(pred, truth, cfg: DiceConfig = DiceConfig(), binarize_at: float = 0.5) -> float:
    if not 0.0 < binarize_at < 1.0:
        raise ValueError("binarize_at must lie in (0, 1)")
    pred, truth = _check_pair(pred, truth)
    return soft_dice((pred >= binarize_at).astype(np.float64), truth, cfg)


def mean_dice_score(pairs, cfg: DiceConfig = DiceConfig(), binarize_at: float = 0.5) -> float:
    """Per-tile Dice averaged arithmetically over ``(pred, truth)`` pairs."""
    scores = [dice_score(p, t, cfg, binarize_at) for p, t in pairs]
    if not scores:
        raise ValueError("no tile pairs given")
    return float(np.mean(scores))


def stand_in_segmenter(tile, profile: StainProfile) -> np.ndarray:
    """Coarse nucleus heatmap from the hematoxylin concentration channel.

    The concentration is divided by the profile's robust maximum, clamped to
    ``[0, 1]`` and smoothed with a 3x3 mean filter.
    """
    profile.check_rank()
    tile = np.asarray(tile)
    h = stain_concentrations(tile, profile.stain_matrix)[0].reshape(tile.shape[:2])
    heat = np.clip(h / profile.max_concentration[0], 0.0, 1.0)
    heat = ndimage.uniform_filter(heat, size=3, mode="nearest")
    return np.clip(heat, 0.0, 1.0)


def load_heatmap(path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Read a grayscale 8- or 16-bit heatmap image as floats in ``[0, 1]``."""
    with Image.open(path) as im:
        if im.mode == "L":
            values = np.asarray(im, dtype=np.float64) / 255.0
        elif im.mode in ("I;16", "I;16B", "I;16L", "I"):
            raw = np.asarray(im)
            if raw.min() < 0 or raw.max() > 65535:
                raise ValueError(f"{path}: values outside the 16-bit range")
            values = raw.astype(np.float64) / 65535.0
        else:
            raise ValueError(f"{path}: expected a grayscale image, got mode {im.mode}")
    if shape is not None and values.shape != tuple(shape):
        raise ValueError(f"{path}: heatmap is {values.shape}, expected {tuple(shape)}")
    return values


def save_heatmap(path, heatmap) -> None:
    values = np.clip(np.rint(np.asarray(heatmap) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(values, mode="L").save(path)
