from histomil.mil.scorer import (Bag, ScorerArchitecture, ScorerParams, Tile4C, forward,
                                 score_tile, tile_features)
from histomil.mil.objective import (AggregationConfig, LossConfig, ScoredBag, aggregate,
                                    bag_gradient, bag_loss, bag_loss_and_gradient, classify,
                                    predicted_label, pseudo_prob, score_bag, sigmoid)
from histomil.mil.training import (DegenerateTrainingSet, ModelCheckpoint, TopTiles,
                                   TrainingConfig, bag_accuracy, top_predictive_tiles, train)

__all__ = [
    "AggregationConfig", "Bag", "DegenerateTrainingSet", "LossConfig", "ModelCheckpoint",
    "ScoredBag", "ScorerArchitecture", "ScorerParams", "Tile4C", "TopTiles", "TrainingConfig",
    "aggregate", "bag_accuracy", "bag_gradient", "bag_loss", "bag_loss_and_gradient",
    "classify", "forward", "predicted_label", "pseudo_prob", "score_bag", "score_tile",
    "sigmoid", "tile_features", "top_predictive_tiles", "train",
]
