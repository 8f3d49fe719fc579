from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import stats


class ContingencyResult(NamedTuple):
    p_fisher: float
    p_chi2: float  # Pearson, no continuity correction
    p_chi2_yates: float


def contingency_test(a: int, b: int, c: int, d: int) -> ContingencyResult:
    """Two-sided tests for the table ``[[a, b], [c, d]]``.

    Fisher's exact p sums the hypergeometric probabilities no larger than the
    observed table's. Pearson's chi-square is given both without and with the
    Yates continuity correction.
    """
    table = np.array([[a, b], [c, d]])
    if np.any(table < 0):
        raise ValueError("counts must be non-negative")
    if np.any(table.sum(axis=0) == 0) or np.any(table.sum(axis=1) == 0):
        raise ValueError("contingency table has a zero margin")
    p_fisher = float(stats.fisher_exact(table, alternative="two-sided")[1])
    p_chi2 = stats.chi2_contingency(table, correction=False)[1]
    p_yates = stats.chi2_contingency(table, correction=True)[1]
    return ContingencyResult(p_fisher, float(p_chi2), float(p_yates))
