"""Survival statistics: Kaplan-Meier, log-rank, Cox regression, time-dependent AUC."""

from histomil.survival.records import (SurvivalRecord, complete_cases, encode_categorical,
                                       read_cohort_csv)
from histomil.survival.km import KMCurve, km_estimate, product_limit
from histomil.survival.logrank import (LogrankResult, StratumResult, logrank_arrays,
                                       logrank_test, stratified_analysis)
from histomil.survival.cox import (CollinearityError, CoxFit, cox_fit, cox_fit_arrays,
                                   partial_loglik, univariable_scan)
from histomil.survival.tdauc import td_auc, td_auc_arrays
from histomil.survival.contingency import ContingencyResult, contingency_test

__all__ = [
    "CollinearityError", "ContingencyResult", "CoxFit", "KMCurve", "LogrankResult",
    "StratumResult", "SurvivalRecord", "complete_cases", "contingency_test", "cox_fit",
    "cox_fit_arrays", "encode_categorical", "km_estimate", "logrank_arrays", "logrank_test",
    "partial_loglik", "product_limit", "read_cohort_csv", "stratified_analysis", "td_auc",
    "td_auc_arrays", "univariable_scan",
]
