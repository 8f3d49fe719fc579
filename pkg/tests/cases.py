"""Random (bag, params, config) cases for gradient checks."""

import numpy as np
from scipy.special import logit

from histomil.mil import AggregationConfig, Bag, LossConfig, ScorerParams, aggregate, forward, sigmoid


def gradient_cases(n_cases=24, seed=0):
    """Half signed_mean, half power_sum; kept away from the two non-smooth points.

    The pseudo-probability has a kink at s = t and the signed mean has an
    infinite slope at S = 0, so finite differences are meaningless there.
    """
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n_cases:
        mode = "signed_mean" if len(out) % 2 == 0 else "power_sum"
        agg = AggregationConfig(p=float(rng.choice([1.0, 2.0, 3.0, 5.0])), mode=mode)
        loss = LossConfig(label_orientation=str(rng.choice(["literal", "risk"])))
        n_tiles = int(rng.integers(3, 13))
        bag = Bag(f"b{len(out)}", int(rng.integers(0, 2)), features=rng.random((n_tiles, 260)))
        params = ScorerParams.initialize(seed=int(rng.integers(1 << 30)))
        params.W1[...] *= 0.5
        if mode == "power_sum":
            params.w2[...] *= 0.2
            params.b2[...] = rng.uniform(1.0, 2.0)
        else:
            params.b2[...] = logit(0.4457) + rng.normal(0, 1.0)
        scores, _ = forward(params, bag.feature_matrix())
        if mode == "power_sum" and scores.min() < 0.05:
            continue
        S = aggregate(scores, agg)
        if abs(S) < 0.05 or abs(float(sigmoid(S)) - loss.threshold_t) < 1e-3:
            continue
        out.append((bag, params, agg, loss))
    return out
