"""Bag aggregation, classification and the bag-level training objective."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import expit

from histomil.mil.scorer import Bag, ScorerParams, backward, forward

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class AggregationConfig:
    p: float = 3.0
    mode: str = "signed_mean"  # or "power_sum"

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("aggregation exponent p must be >= 1")
        if self.mode not in ("signed_mean", "power_sum"):
            raise ValueError(f"unknown aggregation mode {self.mode!r}")

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class LossConfig:
    threshold_t: float = 0.4457
    alpha: float = 0.02
    # "literal": the bag label is the target of the cross-entropy as written, so a
    # label-1 bag is pushed below the threshold. "risk": the target is 1 - label,
    # so label-1 (poor outcome) bags are pushed above it.
    label_orientation: str = "literal"

    def __post_init__(self):
        if not 0.0 < self.threshold_t < 1.0:
            raise ValueError("threshold_t must lie in (0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.label_orientation not in ("literal", "risk"):
            raise ValueError(f"unknown label orientation {self.label_orientation!r}")

    def target(self, label: int) -> int:
        return label if self.label_orientation == "literal" else 1 - label

    def as_dict(self):
        return asdict(self)


def _signed_power(x, p):
    return np.sign(x) * np.abs(x) ** p


def aggregate(scores, cfg: AggregationConfig = AggregationConfig()) -> float:
    """Pool tile scores into one bag score.

    ``power_sum`` is ``(sum s_i^p)^(1/p)`` and needs non-negative scores.
    ``signed_mean`` applies ``g(x) = sign(x)|x|^p``, averages, and maps back
    through ``g^-1``, so negative scores are allowed and p = 1 is the mean.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("cannot aggregate an empty bag")
    if cfg.mode == "power_sum":
        if np.any(s < 0):
            raise ValueError("power_sum aggregation requires non-negative scores")
        return float(np.sum(s ** cfg.p) ** (1.0 / cfg.p))
    m = np.sum(_signed_power(s, cfg.p)) / s.size
    return float(_signed_power(m, 1.0 / cfg.p))


def aggregate_grad(scores, S: float, cfg: AggregationConfig) -> np.ndarray:
    """Partial derivatives of the aggregate with respect to each tile score."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    p = cfg.p
    if p == 1:
        return np.ones_like(s) if cfg.mode == "power_sum" else np.full_like(s, 1.0 / s.size)
    if S == 0:
        # the inverse power map has an infinite slope here; treat as flat
        return np.zeros_like(s)
    ratio = (np.abs(s) / abs(S)) ** (p - 1)
    return ratio if cfg.mode == "power_sum" else ratio / s.size


def sigmoid(x):
    return expit(x)


def classify(S: float, cfg: LossConfig = LossConfig()) -> tuple[float, str]:
    """Sigmoid-activated bag score and its risk class (high iff strictly above t)."""
    if not np.isfinite(S):
        raise ValueError("bag score must be finite")
    s = float(sigmoid(S))
    return s, ("high" if s > cfg.threshold_t else "low")


def pseudo_prob(s, cfg: LossConfig = LossConfig()):
    """Piecewise-linear map of an activated score onto [0, 1]; 0.5 at the threshold."""
    t = cfg.threshold_t
    s = np.asarray(s, dtype=np.float64)
    out = np.where(s <= t, ((t - s) / t + 1.0) * 0.5, (1.0 - (s - t) / (1.0 - t)) * 0.5)
    return float(out) if out.ndim == 0 else out


def pseudo_prob_grad(s: float, cfg: LossConfig) -> float:
    # left-branch slope at the kink s == t
    t = cfg.threshold_t
    return -0.5 / t if s <= t else -0.5 / (1.0 - t)


def predicted_label(s: float, cfg: LossConfig) -> int:
    """Label the loss is steering towards for an activated score ``s``."""
    p = pseudo_prob(s, cfg)
    target_one = p > 0.5
    return int(target_one) if cfg.label_orientation == "literal" else int(not target_one)


def cross_entropy(p: float, y: int) -> float:
    pc = min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)
    return -(y * np.log(pc) + (1 - y) * np.log(1.0 - pc))


@dataclass
class ScoredBag:
    slide_id: str
    per_tile_scores: np.ndarray
    coords: list
    aggregate_S: float
    sigmoid_s: float
    pseudo_prob_p: float
    risk_class: str
    label: int | None = None

    @classmethod
    def from_scores(cls, slide_id, scores, coords=None, agg=AggregationConfig(),
                    loss=LossConfig(), label=None) -> "ScoredBag":
        """Build a scored bag from per-tile scores produced by any backbone."""
        scores = np.asarray(scores, dtype=np.float64).ravel()
        coords = list(coords) if coords is not None else [(i, 0) for i in range(scores.size)]
        S = aggregate(scores, agg)
        s, risk = classify(S, loss)
        return cls(slide_id, scores, coords, S, s, pseudo_prob(s, loss), risk, label)


def score_bag(bag: Bag, params: ScorerParams, agg=AggregationConfig(), loss=LossConfig()) -> ScoredBag:
    scores, _ = forward(params, bag.feature_matrix())
    return ScoredBag.from_scores(bag.slide_id, scores, bag.coords, agg, loss, bag.label)


def _forward_bag(bag, params, agg, loss):
    feats = bag.feature_matrix()
    scores, hidden = forward(params, feats)
    S = aggregate(scores, agg)
    s = float(sigmoid(S))
    p = pseudo_prob(s, loss)
    return feats, scores, hidden, S, s, p


def bag_loss(bag: Bag, params: ScorerParams, agg=AggregationConfig(), loss=LossConfig()) -> float:
    """Cross-entropy of one bag (batch size 1) plus ``alpha * sum(w^2)`` over all parameters."""
    *_, p = _forward_bag(bag, params, agg, loss)
    y = loss.target(bag.label)
    return float(cross_entropy(p, y) + loss.alpha * np.dot(params.values, params.values))


def bag_loss_and_gradient(bag: Bag, params: ScorerParams, agg=AggregationConfig(), loss=LossConfig()):
    feats, scores, hidden, S, s, p = _forward_bag(bag, params, agg, loss)
    y = loss.target(bag.label)
    value = float(cross_entropy(p, y) + loss.alpha * np.dot(params.values, params.values))

    if PROB_CLAMP <= p <= 1.0 - PROB_CLAMP:
        dL_dp = -y / p + (1 - y) / (1.0 - p)
    else:
        dL_dp = 0.0  # clamp is flat outside the open range
    dL_dS = dL_dp * pseudo_prob_grad(s, loss) * s * (1.0 - s)
    score_grad = dL_dS * aggregate_grad(scores, S, agg)
    grad = backward(params, feats, hidden, score_grad)
    grad += 2.0 * loss.alpha * params.values
    return value, grad


def bag_gradient(bag: Bag, params: ScorerParams, agg=AggregationConfig(), loss=LossConfig()) -> np.ndarray:
    return bag_loss_and_gradient(bag, params, agg, loss)[1]
