"""SGD training with a halving learning-rate schedule, checkpoints, and tile ranking."""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logit

from histomil.mil.objective import (AggregationConfig, LossConfig, ScoredBag,
                                    bag_loss_and_gradient, predicted_label, score_bag)
from histomil.mil.scorer import Bag, ScorerArchitecture, ScorerParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    initial_lr: float = 1e-4
    lr_halving_epochs: int = 10
    batch_size: int = 1
    epochs: int = 40
    seed: int = 17

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.batch_size != 1:
            raise ValueError("only batch_size = 1 is supported")
        if self.lr_halving_epochs <= 0 or self.epochs < 0:
            raise ValueError("invalid epoch settings")

    def learning_rate(self, epoch: int) -> float:
        """Rate for the 0-based ``epoch``."""
        return self.initial_lr * 0.5 ** (epoch // self.lr_halving_epochs)

    def as_dict(self):
        return asdict(self)


@dataclass
class ModelCheckpoint:
    params: ScorerParams
    aggregation: AggregationConfig = AggregationConfig()
    loss: LossConfig = LossConfig()
    training: TrainingConfig = TrainingConfig()
    epochs_run: int = 0
    loss_trace: list = field(default_factory=list)

    def header(self) -> dict:
        return {
            "format": "histomil-checkpoint/1",
            "architecture": self.params.arch.as_dict(),
            "aggregation": self.aggregation.as_dict(),
            "loss": self.loss.as_dict(),
            "training": self.training.as_dict(),
            "epochs_run": self.epochs_run,
            "seed": self.training.seed,
            "loss_trace": [float(x) for x in self.loss_trace],
        }

    def save(self, path) -> None:
        doc = self.header()
        doc["params_f64le_b64"] = base64.b64encode(
            self.params.values.astype("<f8").tobytes()).decode("ascii")
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        doc = json.loads(Path(path).read_text())
        arch = ScorerArchitecture(**doc["architecture"])
        raw = base64.b64decode(doc["params_f64le_b64"])
        params = ScorerParams(np.frombuffer(raw, dtype="<f8").astype(np.float64), arch)
        return cls(params, AggregationConfig(**doc["aggregation"]), LossConfig(**doc["loss"]),
                   TrainingConfig(**doc["training"]), doc["epochs_run"], doc["loss_trace"])


class DegenerateTrainingSet(ValueError):
    pass


def train(bags: list[Bag], cfg: TrainingConfig = TrainingConfig(), agg=AggregationConfig(),
          loss=LossConfig(), init: ScorerParams | None = None,
          arch: ScorerArchitecture = ScorerArchitecture()) -> ModelCheckpoint:
    """Plain gradient descent, one bag per step, shuffled with a seeded generator each epoch.

    ``loss_trace[e]`` is the mean pre-update bag loss seen during epoch ``e``.
    """
    labels = {b.label for b in bags}
    if len(bags) < 2 or labels != {0, 1}:
        raise DegenerateTrainingSet("degenerate training set: need both labels present")
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        init = ScorerParams.initialize(arch, seed=cfg.seed, output_bias=logit(loss.threshold_t))
    params = init.copy()
    for b in bags:
        b.feature_matrix()
    trace = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        total = 0.0
        for i in rng.permutation(len(bags)):
            value, grad = bag_loss_and_gradient(bags[i], params, agg, loss)
            total += value
            params.values -= lr * grad
        trace.append(total / len(bags))
        log.debug("epoch %d lr %.3g loss %.6f", epoch, lr, trace[-1])
    return ModelCheckpoint(params, agg, loss, cfg, cfg.epochs, trace)


def bag_accuracy(bags: list[Bag], ckpt: ModelCheckpoint) -> float:
    hits = [predicted_label(score_bag(b, ckpt.params, ckpt.aggregation, ckpt.loss).sigmoid_s,
                            ckpt.loss) == b.label for b in bags]
    return float(np.mean(hits))


@dataclass
class TopTiles:
    high: list  # [(slide_id, row, col, score), ...] by descending score
    low: list  # ascending score
    truncated: bool  # fewer than k tiles were available


def top_predictive_tiles(scored: list[ScoredBag], k_per_class: int) -> TopTiles:
    """Globally rank every tile; ties go to the lexicographically smaller provenance."""
    rows = [(b.slide_id, int(r), int(c), float(s))
            for b in scored for (r, c), s in zip(b.coords, b.per_tile_scores)]
    high = sorted(rows, key=lambda x: (-x[3], x[0], x[1], x[2]))[:k_per_class]
    low = sorted(rows, key=lambda x: (x[3], x[0], x[1], x[2]))[:k_per_class]
    truncated = len(rows) < k_per_class
    if truncated:
        log.warning("only %d tiles available for k=%d", len(rows), k_per_class)
    return TopTiles(high, low, truncated)
