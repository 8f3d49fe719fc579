from __future__ import annotations

import numpy as np

from histomil.survival.km import product_limit
from histomil.survival.records import as_arrays, covariate_values


def censoring_survival(time, event):
    """Kaplan-Meier estimate of the censoring distribution G (censorings as events)."""
    return product_limit(time, 1 - np.asarray(event))


def td_auc_arrays(time, event, marker, eval_times):
    """Cumulative/dynamic AUC with inverse-probability-of-censoring weights.

    Cases at ``t`` are subjects with an observed event by ``t``, weighted by
    ``1 / G(T_i-)``; controls are subjects still event-free after ``t`` and share
    the weight ``1 / G(t)``, which cancels. Marker ties count one half.
    Points with no cases or no controls are returned as NaN.
    """
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    marker = np.asarray(marker, dtype=np.float64)
    if not np.all(np.isfinite(marker)):
        raise ValueError("marker values must be finite")
    G = censoring_survival(time, event)
    out = []
    for t in eval_times:
        cases = (time <= t) & (event == 1)
        controls = time > t
        if not cases.any() or not controls.any():
            out.append((float(t), float("nan")))
            continue
        g = G.left_limit(time[cases])
        w = np.where(g > 0, 1.0 / np.where(g > 0, g, 1.0), 0.0)
        mc = marker[cases][:, None]
        mk = marker[controls][None, :]
        concord = (mc > mk) + 0.5 * (mc == mk)
        auc = float((w @ concord).sum() / (w.sum() * controls.sum()))
        out.append((float(t), auc))
    return out


def td_auc(records, marker: str, eval_times):
    time, event = as_arrays(records)
    return td_auc_arrays(time, event, covariate_values(records, marker), eval_times)
