"""Cox proportional-hazards regression by Newton-Raphson on the partial likelihood."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from histomil.survival.records import as_arrays, covariate_values

log = logging.getLogger(__name__)

Z95 = stats.norm.ppf(0.975)


class CollinearityError(ValueError):
    pass


@dataclass
class CoxFit:
    names: list
    beta: np.ndarray
    se: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    ties: str = "efron"
    n: int = 0
    n_events: int = 0
    message: str = ""
    loglik_trace: list = field(default_factory=list)

    @property
    def hr(self):
        return np.exp(self.beta)

    @property
    def z(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(np.isinf(self.se), 0.0, self.beta / self.se)

    @property
    def p_values(self):
        return 2.0 * stats.norm.sf(np.abs(self.z))

    @property
    def ci95(self):
        with np.errstate(invalid="ignore", over="ignore"):
            lo = np.exp(self.beta - Z95 * self.se)
            hi = np.exp(self.beta + Z95 * self.se)
        return lo, hi

    def table(self) -> list[dict]:
        lo, hi = self.ci95
        return [{"variable": n, "hr": float(h), "ci_low": float(a), "ci_high": float(b),
                 "z": float(z), "p": float(p)}
                for n, h, a, b, z, p in zip(self.names, self.hr, lo, hi, self.z, self.p_values)]


def _risk_blocks(time, event):
    """Per distinct event time: (indices of the risk set, indices of tied events)."""
    blocks = []
    for t in np.unique(time[event == 1]):
        blocks.append((np.nonzero(time >= t)[0], np.nonzero((time == t) & (event == 1))[0]))
    return blocks


def partial_loglik(beta, X, blocks, ties="efron", derivatives=True):
    """Partial log-likelihood, or ``(ll, gradient, Hessian)`` when ``derivatives`` is set."""
    p = X.shape[1]
    eta = X @ beta
    shift = eta.max() if eta.size else 0.0
    w = np.exp(eta - shift)
    ll = 0.0
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    for risk, dead in blocks:
        d = dead.size
        wr, Xr = w[risk], X[risk]
        wd, Xd = w[dead], X[dead]
        s0r, s1r = wr.sum(), wr @ Xr
        s0d, s1d = wd.sum(), wd @ Xd
        ll += eta[dead].sum()
        if derivatives:
            grad += Xd.sum(axis=0)
            s2r = (Xr * wr[:, None]).T @ Xr
            s2d = (Xd * wd[:, None]).T @ Xd
        for l in range(d):
            frac = l / d if ties == "efron" else 0.0
            s0 = s0r - frac * s0d
            ll -= np.log(s0) + shift
            if derivatives:
                a = (s1r - frac * s1d) / s0
                grad -= a
                hess -= (s2r - frac * s2d) / s0 - np.outer(a, a)
    return (ll, grad, hess) if derivatives else ll


def _collinear_groups(X, names):
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    tol = s.max() * max(X.shape) * np.finfo(float).eps * 10 if s.size else 0.0
    null = vt[s <= tol]
    involved = sorted({names[j] for v in null for j in np.nonzero(np.abs(v) > 1e-8)[0]})
    return involved


def cox_fit_arrays(time, event, X, names=None, ties="efron", tol=1e-9, max_iter=50) -> CoxFit:
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if ties not in ("efron", "breslow"):
        raise ValueError(f"unknown tie method {ties!r}")
    if not event.any():
        raise ValueError("Cox regression needs at least one event")

    # constant columns carry no information: beta = 0 with unbounded SE
    constant = np.all(X == X[0], axis=0)
    active = np.nonzero(~constant)[0]
    if active.size:
        bad = _collinear_groups(X[:, active], [names[j] for j in active])
        if bad:
            raise CollinearityError(f"collinear covariates: {', '.join(bad)}")

    Xa = X[:, active]
    # centring leaves the partial likelihood unchanged and helps conditioning
    Xa = Xa - Xa.mean(axis=0)
    blocks = _risk_blocks(time, event)
    beta = np.zeros(active.size)
    ll, grad, hess = partial_loglik(beta, Xa, blocks, ties)
    trace = [ll]
    converged = active.size == 0 or np.max(np.abs(grad)) < tol
    it = 0
    message = ""
    while not converged and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            message = "singular information matrix"
            break
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            ll_new, g_new, h_new = partial_loglik(cand, Xa, blocks, ties)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            scale *= 0.5
        else:
            message = "step-halving failed to improve the likelihood"
            break
        beta, ll, grad, hess = cand, ll_new, g_new, h_new
        trace.append(ll)
        converged = np.max(np.abs(grad)) < tol

    full_beta = np.zeros(p)
    full_se = np.full(p, np.inf)
    full_beta[active] = beta
    if active.size:
        with np.errstate(invalid="ignore"):
            try:
                cov = np.linalg.inv(-hess)
                full_se[active] = np.sqrt(np.diag(cov))
            except np.linalg.LinAlgError:
                full_se[active] = np.nan
    if constant.any():
        message = (message + "; " if message else "") + \
            "constant covariates: " + ", ".join(names[j] for j in np.nonzero(constant)[0])

    sd = X[:, active].std(axis=0) if active.size else np.array([])
    if active.size and (np.any(np.abs(beta) * sd > 10) or not np.all(np.isfinite(full_se[active]))):
        converged = False
        message = (message + "; " if message else "") + \
            "monotone likelihood suspected (coefficients diverging, perfect separation?)"
    if not converged:
        log.warning("Cox fit did not converge: %s", message or "iteration limit")
    return CoxFit(names, full_beta, full_se, float(ll), it, bool(converged), ties, n,
                  int(event.sum()), message, trace)


def cox_fit(records, covariate_names, ties="efron", tol=1e-9, max_iter=50) -> CoxFit:
    time, event = as_arrays(records)
    X = np.column_stack([covariate_values(records, c) for c in covariate_names])
    return cox_fit_arrays(time, event, X, covariate_names, ties, tol, max_iter)


def univariable_scan(records, covariate_names, ties="efron") -> list[CoxFit]:
    """One single-covariate model per name (the usual univariable table)."""
    return [cox_fit(records, [c], ties) for c in covariate_names]
