from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from histomil.survival.records import as_arrays


@dataclass
class KMCurve:
    times: np.ndarray  # distinct event times, ascending
    survival: np.ndarray  # S(t) just after each time
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t):
        """Right-continuous step function evaluated at ``t``."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")
        values = np.concatenate([[1.0], self.survival])
        return values[idx]

    def left_limit(self, t):
        """``S(t-)``, the value just before ``t``."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="left")
        values = np.concatenate([[1.0], self.survival])
        return values[idx]


def product_limit(time, event) -> KMCurve:
    """Kaplan-Meier on arrays; subjects censored at an event time count as at risk."""
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    if time.size == 0:
        raise ValueError("cannot estimate survival from no records")
    uniq = np.unique(time[event == 1])
    at_risk = np.array([(time >= u).sum() for u in uniq], dtype=np.int64)
    events = np.array([((time == u) & (event == 1)).sum() for u in uniq], dtype=np.int64)
    survival = np.cumprod(1.0 - events / at_risk) if uniq.size else np.array([])
    return KMCurve(uniq, survival, at_risk, events)


def km_estimate(records) -> KMCurve:
    return product_limit(*as_arrays(records))
