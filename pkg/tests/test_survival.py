import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histomil.survival import (CollinearityError, SurvivalRecord, complete_cases, contingency_test,
                               cox_fit, cox_fit_arrays, encode_categorical, km_estimate,
                               logrank_arrays, logrank_test, partial_loglik, product_limit,
                               read_cohort_csv, stratified_analysis, td_auc, td_auc_arrays,
                               univariable_scan)
from histomil.survival.cox import _risk_blocks
from histomil.synthetic import exponential_survival

from oracles import (efron_loglik, fisher_two_sided, grid_argmax_1d, grid_argmax_2d,
                     logrank_two_group, mann_whitney_auc)

# small datasets with ties; times in months
COX_DATA = [
    (np.array([5, 8, 8, 12, 15, 15, 20, 24.]), np.array([1, 1, 0, 1, 1, 1, 0, 1]),
     np.array([1.2, 0.4, 2.0, -0.3, 0.9, 0.1, -1.0, -0.5])),
    (np.array([2, 3, 3, 3, 7, 9, 11.]), np.array([1, 1, 1, 0, 1, 0, 1]),
     np.array([1, 0, 1, 1, 0, 0, 1.])),
    (np.array([1, 2, 4, 4, 6, 6, 6, 9, 10, 13.]), np.array([1, 0, 1, 1, 1, 1, 0, 1, 0, 1]),
     np.array([0.5, -1.2, 2.2, 0.3, 1.1, -0.4, 0.0, -0.8, 1.5, -2.0])),
]


def records(time, event, **covs):
    return [SurvivalRecord(f"p{i}", float(t), int(e), {k: v[i] for k, v in covs.items()})
            for i, (t, e) in enumerate(zip(time, event))]


# ---------------------------------------------------------------- Kaplan-Meier

def test_km_hand_example():
    # times 1,2,2(c),3,3,4(c),5 with events marked
    time = [1, 2, 2, 3, 3, 4, 5]
    event = [1, 1, 0, 1, 1, 0, 1]
    km = product_limit(time, event)
    np.testing.assert_array_equal(km.times, [1, 2, 3, 5])
    np.testing.assert_array_equal(km.at_risk, [7, 6, 4, 1])
    np.testing.assert_array_equal(km.events, [1, 1, 2, 1])
    expect = np.cumprod([6 / 7, 5 / 6, 2 / 4, 0 / 1])
    np.testing.assert_allclose(km.survival, expect, rtol=0, atol=1e-15)
    assert km(0.5) == 1.0 and km(2) == pytest.approx(5 / 7) and km(2.5) == pytest.approx(5 / 7)
    assert km.left_limit(2) == pytest.approx(6 / 7)


def test_km_censoring_at_event_time_stays_at_risk():
    km = product_limit([3, 3], [1, 0])
    assert km.at_risk[0] == 2 and km.survival[0] == 0.5


def test_km_all_censored_and_empty():
    km = product_limit([1, 2, 3], [0, 0, 0])
    assert km.times.size == 0 and km(10) == 1.0
    with pytest.raises(ValueError):
        product_limit([], [])


# ---------------------------------------------------------------- log-rank

LR_TIME = [6, 6, 7, 9, 10, 13, 16, 19, 22, 23]
LR_EVENT = [1, 0, 1, 1, 0, 1, 1, 0, 1, 1]
LR_GROUP = [0, 1, 1, 0, 1, 0, 1, 1, 0, 0]


def test_logrank_matches_oracle():
    res = logrank_arrays(LR_TIME, LR_EVENT, LR_GROUP)
    oe, var = logrank_two_group(LR_TIME, LR_EVENT, LR_GROUP)
    assert res.chi2 == pytest.approx(oe ** 2 / var, abs=1e-10)
    assert res.df == 1


def test_logrank_identical_groups():
    t = [1, 2, 3, 4]
    e = [1, 0, 1, 1]
    res = logrank_test([records(t, e), records(t, e)])
    assert res.chi2 == 0.0 and res.p == 1.0


def test_logrank_three_groups_is_invariant_to_label_order():
    rng = np.random.default_rng(0)
    t = rng.integers(1, 30, 60).astype(float)
    e = rng.integers(0, 2, 60)
    g = rng.integers(0, 3, 60)
    a = logrank_arrays(t, e, g)
    b = logrank_arrays(t, e, (g + 1) % 3)
    assert a.df == 2 and a.chi2 == pytest.approx(b.chi2, rel=1e-10)


def test_logrank_errors():
    with pytest.raises(ValueError):
        logrank_arrays([1, 2], [1, 1], [0, 0])
    with pytest.raises(ValueError):
        logrank_arrays([1, 2], [0, 0], [0, 1])


def test_stratified_analysis_flags_untestable_strata():
    recs = records(LR_TIME, LR_EVENT, cls=[float(g) for g in LR_GROUP],
                   stage=["I"] * 6 + ["II"] * 4)
    recs[6].covariates["cls"] = recs[7].covariates["cls"] = recs[8].covariates["cls"] = recs[9].covariates["cls"] = 1.0
    out = stratified_analysis(recs, "stage", "cls")
    assert [o.stratum for o in out] == ["I", "II"]
    assert out[0].testable and not out[1].testable
    assert out[1].note == "single risk class"


# ---------------------------------------------------------------- Cox

@pytest.mark.parametrize("ties", ["efron", "breslow"])
@pytest.mark.parametrize("k", range(3))
def test_cox_matches_grid_search(k, ties):
    time, event, x = COX_DATA[k]
    fit = cox_fit_arrays(time, event, x[:, None], ["x"], ties=ties)
    if ties == "efron":
        f = lambda b: efron_loglik(b, time, event, x)
    else:
        blocks = _risk_blocks(time, event)
        f = lambda b: partial_loglik(np.array([b]), x[:, None], blocks, "breslow", derivatives=False)
    assert fit.converged
    assert fit.beta[0] == pytest.approx(grid_argmax_1d(f), abs=1e-3)
    assert fit.se[0] > 0


def test_efron_loglik_agrees_with_oracle():
    time, event, x = COX_DATA[0]
    blocks = _risk_blocks(time, event)
    for b in (-1.0, 0.0, 0.7):
        ll = partial_loglik(np.array([b]), (x - x.mean())[:, None], blocks, "efron", derivatives=False)
        # every Efron factor moves with the linear term, so centring cancels out
        assert ll == pytest.approx(efron_loglik(b, time, event, x), abs=1e-10)


def test_cox_two_covariates_matches_grid_search():
    time, event, x = COX_DATA[2]
    z = np.array([1, 0, 0, 1, 1, 0, 1, 0, 0, 1.])
    X = np.column_stack([x, z])
    fit = cox_fit_arrays(time, event, X, ["x", "z"])
    ref = grid_argmax_2d(lambda b: efron_loglik(b, time, event, X))
    np.testing.assert_allclose(fit.beta, ref, atol=1e-3)


def test_cox_without_ties_efron_equals_breslow():
    rng = np.random.default_rng(1)
    t = rng.permutation(30).astype(float) + 1
    e = rng.integers(0, 2, 30)
    x = rng.normal(size=(30, 1))
    a = cox_fit_arrays(t, e, x, ["x"], ties="efron")
    b = cox_fit_arrays(t, e, x, ["x"], ties="breslow")
    assert a.beta[0] == pytest.approx(b.beta[0], abs=1e-12)


def test_cox_recovers_synthetic_hazard_ratio():
    rng = np.random.default_rng(17)
    labels = rng.permutation(np.arange(200) % 2)
    t, e = exponential_survival(rng, labels)
    fit = cox_fit_arrays(t, e, labels[:, None].astype(float), ["label"])
    assert 2.0 <= fit.hr[0] <= 4.5
    lo, hi = fit.ci95
    assert lo[0] < fit.hr[0] < hi[0]


def test_constant_covariate_gets_infinite_se():
    time, event, x = COX_DATA[0]
    X = np.column_stack([x, np.ones_like(x)])
    fit = cox_fit_arrays(time, event, X, ["x", "one"])
    assert fit.beta[1] == 0.0 and math.isinf(fit.se[1])
    assert fit.table()[1]["p"] == 1.0
    assert "constant" in fit.message


def test_collinear_covariates_raise():
    time, event, x = COX_DATA[2]
    with pytest.raises(CollinearityError, match="a, b"):
        cox_fit_arrays(time, event, np.column_stack([x, 2 * x + 1]), ["a", "b"])


def test_separation_is_flagged_not_converged():
    t = np.arange(1, 11, dtype=float)
    e = np.ones(10, int)
    x = (t <= 5).astype(float)  # every early death in one group
    fit = cox_fit_arrays(t, e, x[:, None], ["x"])
    assert not fit.converged
    assert "monotone likelihood" in fit.message


def test_cox_loglik_is_non_decreasing():
    time, event, x = COX_DATA[1]
    fit = cox_fit_arrays(time, event, x[:, None], ["x"])
    assert np.all(np.diff(fit.loglik_trace) >= -1e-12)


def test_no_events_raises():
    with pytest.raises(ValueError):
        cox_fit_arrays(np.array([1.0, 2.0]), np.array([0, 0]), np.array([[1.0], [0.0]]), ["x"])


def test_univariable_scan_and_records_api():
    time, event, x = COX_DATA[0]
    recs = records(time, event, x=list(x), y=list(x ** 2))
    fits = univariable_scan(recs, ["x", "y"])
    assert [f.names for f in fits] == [["x"], ["y"]]
    assert cox_fit(recs, ["x"]).beta[0] == pytest.approx(cox_fit_arrays(time, event, x[:, None], ["x"]).beta[0])


# ---------------------------------------------------------------- records

def test_cohort_csv_missing_values_and_categories(tmp_path):
    path = tmp_path / "c.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "time", "event", "afp", "stage"])
        w.writerows([["a", 5, 1, 12.5, "I"], ["b", 7, 0, "", "II"], ["c", 9, 1, 3, "III"], ["d", 2, 0, 8, "I"]])
    recs = read_cohort_csv(path)
    assert recs[1].covariates["afp"] is None and recs[2].covariates["stage"] == "III"
    kept, dropped = complete_cases(recs, ["afp"])
    assert dropped == 1 and [r.patient_id for r in kept] == ["a", "c", "d"]
    names = encode_categorical(recs, "stage", "I")
    assert names == ["stage[II]", "stage[III]"]
    assert [r.covariates["stage[III]"] for r in recs] == [0.0, 0.0, 1.0, 0.0]
    with pytest.raises(ValueError):
        encode_categorical(recs, "stage", "IV")


def test_record_validation():
    with pytest.raises(ValueError):
        SurvivalRecord("x", -1.0, 1)
    with pytest.raises(ValueError):
        SurvivalRecord("x", 1.0, 2)


# ---------------------------------------------------------------- td-AUC

@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_td_auc_uncensored_is_mann_whitney(seed):
    rng = np.random.default_rng(seed)
    t = rng.integers(1, 40, 25).astype(float)
    m = rng.integers(0, 6, 25).astype(float)  # ties in the marker on purpose
    e = np.ones(25, int)
    for tt, auc in td_auc_arrays(t, e, m, [10.0, 20.0]):
        cases = t <= tt
        if cases.all() or not cases.any():
            assert math.isnan(auc)
        else:
            assert auc == pytest.approx(mann_whitney_auc(m, cases), abs=1e-12)


def test_td_auc_perfect_and_constant_markers():
    t = np.array([2, 4, 6, 8, 10, 12.])
    e = np.array([1, 1, 0, 1, 1, 0])
    assert td_auc_arrays(t, e, -t, [7.0])[0][1] == pytest.approx(1.0)
    assert td_auc_arrays(t, e, np.zeros(6), [7.0])[0][1] == 0.5


def test_td_auc_equal_case_weights_reduce_to_pair_count():
    t = np.array([1, 3, 5, 7, 9.])
    e = np.array([0, 1, 1, 0, 0])
    m = np.array([0.0, 0.2, 0.9, 0.5, 0.1])
    (tt, auc), = td_auc_arrays(t, e, m, [6.0])
    # G(3-) = G(5-) = 4/5: both cases share one weight, so the AUC reduces to the plain pair count
    assert auc == pytest.approx(mann_whitney_auc([0.2, 0.9, 0.5, 0.1], [True, True, False, False]))


def test_td_auc_unequal_case_weights():
    # censoring between the two cases gives the later case weight 1/G(T-) = 4/3
    t = np.array([1, 2, 3, 5, 8, 9.])
    e = np.array([1, 0, 1, 0, 0, 0])
    m = np.array([0.9, 0.0, 0.1, 0.5, 0.2, 0.3])
    (tt, auc), = td_auc_arrays(t, e, m, [4.0])
    # controls: T > 4 -> markers 0.5, 0.2, 0.3; case at 1 beats all 3, case at 3 beats none
    w1, w3 = 1.0, 1.0 / (4 / 5)
    assert auc == pytest.approx((w1 * 3 + w3 * 0) / ((w1 + w3) * 3), abs=1e-12)


def test_td_auc_records_api_and_errors():
    recs = records([1, 2, 3, 4], [1, 1, 0, 1], m=[4.0, 3.0, 2.0, 1.0])
    assert td_auc(recs, "m", [2.5]) == [(2.5, 1.0)]
    with pytest.raises(ValueError):
        td_auc_arrays([1, 2], [1, 0], [np.nan, 1.0], [1.5])


# ---------------------------------------------------------------- contingency

@given(st.integers(0, 12), st.integers(0, 12), st.integers(0, 12), st.integers(0, 12))
@settings(max_examples=150, deadline=None)
def test_fisher_matches_hypergeometric_oracle(a, b, c, d):
    if min(a + b, c + d, a + c, b + d) == 0:
        with pytest.raises(ValueError):
            contingency_test(a, b, c, d)
        return
    assert contingency_test(a, b, c, d).p_fisher == pytest.approx(fisher_two_sided(a, b, c, d), rel=1e-9)


def test_pearson_chi_square_by_hand():
    a, b, c, d = 10, 20, 30, 15
    n = a + b + c + d
    chi2 = n * (a * d - b * c) ** 2 / ((a + b) * (c + d) * (a + c) * (b + d))
    from scipy.stats import chi2 as chi2_dist
    res = contingency_test(a, b, c, d)
    assert res.p_chi2 == pytest.approx(chi2_dist.sf(chi2, 1), rel=1e-12)
    yates = n * (abs(a * d - b * c) - n / 2) ** 2 / ((a + b) * (c + d) * (a + c) * (b + d))
    assert res.p_chi2_yates == pytest.approx(chi2_dist.sf(yates, 1), rel=1e-12)


def test_reported_cohort_p_values_follow_a_totals_layout():
    # The published p-values are reproduced by a Yates chi-square on
    # [[x_high, x_low], [n_high, n_low]] rather than on the 2x2 of counts and
    # complements; recorded here so the discrepancy stays visible.
    from scipy.stats import chi2_contingency
    rows = [((25, 4), 0.0003), ((36, 11), 0.001), ((28, 7), 0.0012), ((3, 19), 0.0019)]
    for (hi, lo), reported in rows:
        p = chi2_contingency([[hi, lo], [200, 200]], correction=True)[1]
        assert abs(p - reported) / reported < 0.2
