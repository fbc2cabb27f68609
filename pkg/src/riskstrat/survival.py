"""Stratified Cox regression for one binary exposure, Kaplan-Meier curves and
absolute risk differences at a horizon."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .propensity import stratum_weights

log = logging.getLogger(__name__)

DAYS_PER_YEAR = 365.25


class CoxError(ValueError):
    pass


class CoxNoContrast(CoxError):
    pass


class CoxNonConvergence(CoxError):
    pass


class _CoxProblem:
    """Per-(stratum, time) aggregation that makes each likelihood evaluation O(n)."""

    def __init__(self, time, event, z, strata=None, ties="efron"):
        time = np.asarray(time)
        event = np.asarray(event, bool)
        z = np.asarray(z, float)
        strata = np.zeros(len(time), np.int64) if strata is None else np.asarray(strata)
        if ties not in ("efron", "breslow"):
            raise ValueError("ties must be 'efron' or 'breslow'")
        self.ties = ties
        _, strata = np.unique(strata, return_inverse=True)
        strata = strata.ravel()

        keep = np.zeros(len(time), dtype=bool)
        for s in np.unique(strata):
            in_s = strata == s
            if event[in_s].any() and np.ptp(z[in_s]) > 0:
                keep |= in_s
        if not keep.any():
            raise CoxNoContrast("no contrast: no stratum with both arms and at least one event")
        time, event, z, strata = time[keep], event[keep], z[keep], strata[keep]

        order = np.lexsort((time, strata))
        self.time, self.event, self.z, self.strata = time[order], event[order], z[order], strata[order]
        key_change = np.empty(len(self.time), dtype=bool)
        key_change[0] = True
        key_change[1:] = (np.diff(self.time) != 0) | (np.diff(self.strata) != 0)
        self.group = np.cumsum(key_change) - 1
        n_groups = int(self.group[-1]) + 1
        group_stratum = self.strata[key_change]
        # index of the first group of the next stratum, per group
        last = np.searchsorted(group_stratum, group_stratum, side="right")
        self.next_stratum = last
        self.n_groups = n_groups
        self.d = np.bincount(self.group, weights=self.event, minlength=n_groups)
        self.zsum_events = float(np.sum(self.z[self.event]))
        ev_groups = np.flatnonzero(self.d > 0)
        self.ev_groups = ev_groups
        d_ev = self.d[ev_groups].astype(np.int64)
        # Efron: one term per tied event, fraction l/d, l = 0..d-1
        self.rep_group = np.repeat(ev_groups, d_ev)
        starts = np.repeat(np.cumsum(d_ev) - d_ev, d_ev)
        l_ = np.arange(len(self.rep_group)) - starts
        self.frac = (l_ / np.repeat(d_ev, d_ev)) if ties == "efron" else np.zeros(len(l_))

    def _risk_sums(self, values):
        per_group = np.bincount(self.group, weights=values, minlength=self.n_groups)
        rev = np.concatenate([np.cumsum(per_group[::-1])[::-1], [0.0]])
        return rev[:-1] - rev[self.next_stratum]

    def evaluate(self, beta: float):
        """Log partial likelihood, gradient and Hessian at ``beta``."""
        ez = np.exp(beta * self.z)
        s0 = self._risk_sums(ez)
        s1 = self._risk_sums(self.z * ez)
        s2 = self._risk_sums(self.z * self.z * ez)
        e = self.event
        d0 = np.bincount(self.group[e], weights=ez[e], minlength=self.n_groups)
        d1 = np.bincount(self.group[e], weights=(self.z * ez)[e], minlength=self.n_groups)
        d2 = np.bincount(self.group[e], weights=(self.z * self.z * ez)[e], minlength=self.n_groups)
        g, f = self.rep_group, self.frac
        a0 = s0[g] - f * d0[g]
        a1 = s1[g] - f * d1[g]
        a2 = s2[g] - f * d2[g]
        ratio = a1 / a0
        ll = beta * self.zsum_events - float(np.sum(np.log(a0)))
        grad = self.zsum_events - float(np.sum(ratio))
        hess = -float(np.sum(a2 / a0 - ratio * ratio))
        return ll, grad, hess


def cox_partial_loglik(beta, time, event, z, strata=None, ties="efron"):
    """``(loglik, gradient, hessian)`` of the stratified partial likelihood at ``beta``."""
    return _CoxProblem(time, event, z, strata, ties).evaluate(float(beta))


def fit_cox(time, event, treatment, strata=None, ties="efron", max_iter=100, tol=1e-10):
    """Newton-Raphson fit of a single-coefficient stratified Cox model.

    Returns ``(log_hr, se)`` with the SE from the observed information.
    Raises ``CoxNoContrast`` when no stratum is informative and
    ``CoxNonConvergence`` for a monotone likelihood.
    """
    problem = _CoxProblem(time, event, treatment, strata, ties)
    beta = 0.0
    ll, grad, hess = problem.evaluate(beta)
    for _ in range(max_iter):
        if hess >= -1e-12:
            raise CoxNonConvergence("non-convergence: flat partial likelihood")
        step = -grad / hess
        t = 1.0
        while True:
            cand = beta + t * step
            ll_c, g_c, h_c = problem.evaluate(cand)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
            if t < 1e-10:
                raise CoxNonConvergence("non-convergence: line search failed")
        beta, ll, grad, hess = cand, ll_c, g_c, h_c
        if abs(beta) > 20:
            raise CoxNonConvergence("non-convergence: monotone likelihood (|log HR| > 20)")
        if abs(t * step) < tol:
            break
    else:
        raise CoxNonConvergence(f"non-convergence after {max_iter} iterations")
    if hess >= 0:
        raise CoxNonConvergence("non-convergence: non-negative curvature at optimum")
    return float(beta), float(1.0 / np.sqrt(-hess))


# ------------------------------------------------------------ Kaplan-Meier

@dataclass
class SurvivalCurve:
    event_times: np.ndarray
    survival: np.ndarray
    greenwood_var: np.ndarray
    n_at_risk: np.ndarray
    n_events: np.ndarray

    def at(self, t: float) -> float:
        i = np.searchsorted(self.event_times, t, side="right")
        return 1.0 if i == 0 else float(self.survival[i - 1])

    def variance_at(self, t: float) -> float:
        i = np.searchsorted(self.event_times, t, side="right")
        return 0.0 if i == 0 else float(self.greenwood_var[i - 1])


def km_curve(time, event) -> SurvivalCurve:
    """Product-limit estimate with Greenwood variance, stepping at event times.

    Once the curve reaches zero its variance is reported as 0.
    """
    time = np.asarray(time)
    event = np.asarray(event, bool)
    if len(time) == 0:
        raise ValueError("empty arm")
    uniq, inv = np.unique(time, return_inverse=True)
    total = np.bincount(inv.ravel(), minlength=len(uniq))
    d = np.bincount(inv.ravel(), weights=event, minlength=len(uniq)).astype(np.int64)
    at_risk = np.cumsum(total[::-1])[::-1]
    has = d > 0
    t, n, d = uniq[has], at_risk[has], d[has]
    # (n - d) / n is correctly rounded; 1 - d / n is not (1 - 1/3 != 2/3)
    surv = np.cumprod((n - d) / n)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(n > d, d / (n * (n - d).astype(float)), np.inf)
        cum = np.cumsum(terms)
        var = np.where(surv > 0, surv * surv * cum, 0.0)
    return SurvivalCurve(t, surv, var, n, d)


def _km_at_horizon(cell_time, cell_event, counts, horizon):
    """S(horizon) for each row of ``counts`` (replicates x cells)."""
    counts = np.atleast_2d(counts)
    uniq, inv = np.unique(cell_time, return_inverse=True)
    inv = inv.ravel()
    K = len(uniq)
    total = np.zeros((counts.shape[0], K))
    events = np.zeros((counts.shape[0], K))
    np.add.at(total.T, inv, counts.T)
    np.add.at(events.T, inv[cell_event], counts.T[cell_event])
    at_risk = np.cumsum(total[:, ::-1], axis=1)[:, ::-1]
    within = uniq <= horizon
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(at_risk > 0, (at_risk - events) / at_risk, 1.0)
    return np.prod(factor[:, within], axis=1)


@dataclass
class ArdResult:
    ard: float
    lo: float
    hi: float
    weights: dict
    excluded_strata: list


def ard_at_horizon(time, event, treatment, strata=None, horizon: int = 730,
                   estimand: str = "ATT", bootstrap_reps: int = 500, seed=0) -> ArdResult:
    """Stratum-weighted KM difference ``S_T(h) - S_C(h)`` in percentage points.

    Positive values favour the target treatment.  The 95% CI is a percentile
    bootstrap resampling subjects within each (stratum, arm) cell.
    """
    time = np.asarray(time)
    event = np.asarray(event, bool)
    treatment = np.asarray(treatment)
    strata = np.ones(len(time), np.int64) if strata is None else np.asarray(strata)
    weights = stratum_weights(strata, treatment, estimand)
    excluded = sorted(int(s) for s in np.unique(strata) if int(s) not in weights)
    if excluded:
        warnings.warn(f"strata {excluded} lack one arm; excluded with weight renormalization",
                      stacklevel=2)
    if not weights:
        raise ValueError("no stratum contains both arms")
    rng = np.random.default_rng(seed)
    point = 0.0
    boot = np.zeros(bootstrap_reps)
    for s, w in weights.items():
        for arm, sign in ((1, 1.0), (0, -1.0)):
            mask = (strata == s) & (treatment == arm)
            t, e = time[mask], event[mask]
            if t.max() < horizon:
                log.debug("stratum %s arm %s: follow-up ends before horizon", s, arm)
            cells, cell_counts = np.unique(np.column_stack([t, e]), axis=0, return_counts=True)
            ct, ce = cells[:, 0], cells[:, 1].astype(bool)
            point += sign * w * _km_at_horizon(ct, ce, cell_counts, horizon)[0]
            if bootstrap_reps:
                draws = rng.multinomial(int(mask.sum()), cell_counts / mask.sum(),
                                        size=bootstrap_reps)
                boot += sign * w * _km_at_horizon(ct, ce, draws, horizon)
    if bootstrap_reps:
        lo, hi = np.percentile(100.0 * boot, [2.5, 97.5])
    else:
        lo = hi = float("nan")
    return ArdResult(100.0 * point, float(lo), float(hi), weights, excluded)


def person_years(followup_days, horizon: int) -> float:
    return float(np.sum(np.minimum(followup_days, horizon)) / DAYS_PER_YEAR)
