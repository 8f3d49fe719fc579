from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import stats

from histomil.survival.records import as_arrays, covariate_values


class LogrankResult(NamedTuple):
    chi2: float
    df: int
    p: float


def logrank_arrays(time, event, group) -> LogrankResult:
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    group = np.asarray(group)
    labels = np.unique(group)
    if labels.size < 2:
        raise ValueError("log-rank test needs at least two groups")
    if not event.any():
        raise ValueError("no events")
    k = labels.size
    member = group[None, :] == labels[:, None]  # (k, n)
    O = np.zeros(k)
    E = np.zeros(k)
    V = np.zeros((k, k))
    for t in np.unique(time[event == 1]):
        risk = time >= t
        died = risk & (time == t) & (event == 1)
        n = risk.sum()
        d = died.sum()
        n_g = (member & risk).sum(axis=1).astype(np.float64)
        O += (member & died).sum(axis=1)
        E += n_g * d / n
        if n > 1:
            frac = n_g / n
            V += d * (n - d) / (n - 1) * (np.diag(frac) - np.outer(frac, frac))
    diff = (O - E)[:-1]
    chi2 = float(diff @ np.linalg.solve(V[:-1, :-1], diff)) if np.any(diff) else 0.0
    df = k - 1
    return LogrankResult(chi2, df, float(stats.chi2.sf(chi2, df)))


def logrank_test(groups) -> LogrankResult:
    """Log-rank test across two or more lists of :class:`SurvivalRecord`."""
    groups = [list(g) for g in groups]
    if len(groups) < 2 or any(len(g) == 0 for g in groups):
        raise ValueError("log-rank test needs at least two non-empty groups")
    time = np.concatenate([as_arrays(g)[0] for g in groups])
    event = np.concatenate([as_arrays(g)[1] for g in groups])
    label = np.concatenate([np.full(len(g), i) for i, g in enumerate(groups)])
    return logrank_arrays(time, event, label)


@dataclass
class StratumResult:
    stratum: object
    n: int
    events: int
    chi2: float = float("nan")
    df: int = 0
    p: float = float("nan")
    testable: bool = True
    note: str = ""


def stratified_analysis(records, stratify_by: str, classifier: str) -> list[StratumResult]:
    """Log-rank test of the classifier's risk groups inside each stratum."""
    records = list(records)
    strata = sorted({r.covariates[stratify_by] for r in records}, key=str)
    out = []
    for level in strata:
        sub = [r for r in records if r.covariates[stratify_by] == level]
        time, event = as_arrays(sub)
        cls = covariate_values(sub, classifier)
        res = StratumResult(level, len(sub), int(event.sum()))
        if np.unique(cls).size < 2:
            res.testable, res.note = False, "single risk class"
        elif not event.any():
            res.testable, res.note = False, "no events"
        else:
            res.chi2, res.df, res.p = logrank_arrays(time, event, cls)
        out.append(res)
    return out
