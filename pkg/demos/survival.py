"""Kaplan-Meier, log-rank, Cox regression and time-dependent AUC on a simulated cohort.

Run: python3 demos/survival.py
"""

import numpy as np

from histomil.survival import (contingency_test, cox_fit_arrays, logrank_arrays, product_limit,
                               td_auc_arrays)
from histomil.synthetic import exponential_survival

# %% 200 patients, hazard ratio 3 between label 1 and label 0
rng = np.random.default_rng(17)
labels = rng.permutation(np.arange(200) % 2)
time, event = exponential_survival(rng, labels, hazard_ratio=3.0)
print("events", event.sum(), "of", event.size)

# %% survival curves per group
for g in (0, 1):
    curve = product_limit(time[labels == g], event[labels == g])
    print(f"group {g}: S(12) {curve(12.0):.3f}  S(36) {curve(36.0):.3f}")

# %% log-rank test and Cox model
lr = logrank_arrays(time, event, labels)
print(f"log-rank chi2 {lr.chi2:.2f}, p {lr.p:.2g}")
fit = cox_fit_arrays(time, event, labels[:, None].astype(float), ["label"])
row = fit.table()[0]
print(f"Cox HR {row['hr']:.2f} (95% CI {row['ci_low']:.2f}-{row['ci_high']:.2f}), p {row['p']:.2g}")

# %% a noisy marker correlated with the label, scored by td-AUC
marker = labels + rng.normal(0, 1.0, labels.size)
print("td-AUC at 12/24/36 months:", np.round(td_auc_arrays(time, event, marker, [12, 24, 36]), 3))

# %% 2x2 association test: 25 of 200 vs 4 of 200
print(contingency_test(25, 175, 4, 196))
