"""Propensity scores, preference scores, caliper matching, PS strata and covariate balance."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logit

from .cohort import Design
from .lasso import fit_lasso_cv, linear_predictor

log = logging.getLogger(__name__)

EQUIPOISE_BAND = (0.3, 0.7)


class CollapsedStrataWarning(UserWarning):
    pass


@dataclass
class PsAssignment:
    """Per-subject propensity bookkeeping, aligned with ``subject_ids``.

    ``match_partner`` holds the partner's subject id where ``matched`` is true.
    ``ps_stratum`` (1-based) is set only once stratification was requested.
    """

    subject_ids: np.ndarray
    treatment: np.ndarray
    propensity: np.ndarray
    preference: np.ndarray
    matched: np.ndarray
    match_partner: np.ndarray
    ps_stratum: np.ndarray | None = None

    @classmethod
    def draft(cls, subject_ids, treatment, propensity):
        subject_ids = np.asarray(subject_ids, np.int64)
        treatment = np.asarray(treatment, np.int8)
        propensity = np.asarray(propensity, float)
        p = treatment.mean() if len(treatment) else 0.5
        pref = (preference_score(propensity, p) if 0 < p < 1
                else np.full(len(propensity), np.nan))
        n = len(subject_ids)
        return cls(subject_ids, treatment, propensity, pref,
                   np.zeros(n, dtype=bool), np.zeros(n, dtype=np.int64))

    def matched_subjects(self) -> np.ndarray:
        return self.subject_ids[self.matched]


@dataclass
class BalanceRow:
    covariate_id: int
    smd_before: float
    smd_after: float
    name: str = ""


def preference_score(propensity, treated_fraction):
    """Propensity rescaled so that the treated fraction maps to 0.5.

    ``logit(F) = logit(S) - logit(P)``.
    """
    s = np.asarray(propensity, dtype=float)
    p = float(treated_fraction)
    if not 0 < p < 1:
        raise ValueError("treated fraction must lie strictly inside (0, 1)")
    if not np.all((s > 0) & (s < 1)):
        raise ValueError("propensity must lie strictly inside (0, 1)")
    out = 1.0 / (1.0 + np.exp(-(logit(s) - logit(p))))
    return float(out) if np.ndim(out) == 0 else out


def estimate_propensity(design: Design, treatment, folds=3, grid=None, seed=0):
    """LASSO propensity model with CV-selected penalty; returns ``(propensity, model)``."""
    model = fit_lasso_cv(design, np.asarray(treatment, float), folds, grid, seed=seed)
    lp = linear_predictor(model, design)
    # keep scores representable strictly inside (0, 1)
    lp = np.clip(lp, -30.0, 30.0)
    return 1.0 / (1.0 + np.exp(-lp)), model


def match_caliper(ps: PsAssignment, caliper: float = 0.2, seed=0,
                  caliper_scale: str = "standardized logit") -> PsAssignment:
    """Greedy 1:1 nearest-neighbour matching without replacement on logit PS.

    Treated subjects are processed in descending propensity order (ties in a
    seeded random order) and take the closest still-available comparator whose
    logit distance is within ``caliper * SD(logit PS)``.  With
    ``caliper_scale="logit"`` the caliper is used as an absolute width.
    """
    if caliper <= 0:
        raise ValueError("caliper must be > 0")
    n = len(ps.subject_ids)
    matched = np.zeros(n, dtype=bool)
    partner = np.zeros(n, dtype=np.int64)
    out = PsAssignment(ps.subject_ids, ps.treatment, ps.propensity, ps.preference,
                       matched, partner, ps.ps_stratum)
    t_idx = np.flatnonzero(ps.treatment == 1)
    c_idx = np.flatnonzero(ps.treatment == 0)
    if len(t_idx) == 0 or len(c_idx) == 0:
        return out
    lp = logit(np.clip(ps.propensity, 1e-300, 1 - 1e-16))
    if caliper_scale == "standardized logit":
        width = caliper * np.std(lp, ddof=1) if n > 1 else 0.0
    elif caliper_scale == "logit":
        width = caliper
    else:
        raise ValueError(f"unknown caliper_scale {caliper_scale!r}")

    rng = np.random.default_rng(seed)
    shuffle = rng.permutation(len(t_idx))
    t_order = t_idx[shuffle][np.argsort(-lp[t_idx][shuffle], kind="stable")]
    c_sorted = c_idx[np.argsort(lp[c_idx], kind="stable")]
    c_lp = lp[c_sorted]
    m = len(c_sorted)
    # next available comparator slot at or right of i (m = none), and at or
    # left of i stored shifted by one (0 = none)
    right = list(range(m + 1))
    left = list(range(m + 1))
    positions = np.searchsorted(c_lp, lp[t_order]).tolist()
    c_lp = c_lp.tolist()
    for ti, pos, x in zip(t_order.tolist(), positions, lp[t_order].tolist()):
        r = _find(right, pos)
        l_ = _find(left, pos) - 1
        best, dist = -1, np.inf
        if r < m:
            best, dist = r, c_lp[r] - x
        if l_ >= 0 and x - c_lp[l_] <= dist:
            best, dist = l_, x - c_lp[l_]
        if best < 0 or dist > width:
            continue
        ci = c_sorted[best]
        matched[ti] = matched[ci] = True
        partner[ti] = ps.subject_ids[ci]
        partner[ci] = ps.subject_ids[ti]
        right[best] = best + 1
        left[best + 1] = best
    return out


def _find(ptr, i):
    root = i
    while ptr[root] != root:
        root = ptr[root]
    while ptr[i] != root:
        ptr[i], i = root, ptr[i]
    return root


def _quantile_labels(values, reference, k):
    values = np.asarray(values, float)
    if k == 1 or len(values) == 0:
        return np.ones(len(values), dtype=np.int64), np.array([])
    ref = values if reference is None else np.asarray(reference, float)
    bounds = np.quantile(ref, np.arange(1, k) / k)
    labels = 1 + np.searchsorted(bounds, values, side="left")
    return labels.astype(np.int64), bounds


def stratify_ps(values, k: int, reference=None) -> np.ndarray:
    """Stratum labels 1..k cut at the k-quantiles of ``reference`` (default: ``values``).

    A value equal to a boundary goes to the lower stratum.  Empty strata are
    collapsed (with a warning) so labels stay consecutive.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    labels, _ = _quantile_labels(values, reference, k)
    present = np.unique(labels)
    if len(present) < k:
        warnings.warn(f"only {len(present)} non-empty propensity strata of {k} requested; "
                      "collapsing", CollapsedStrataWarning, stacklevel=2)
        labels = 1 + np.searchsorted(present, labels)
    return labels


def _arm_stats(x, treat, continuous, strata=None, stratum_weights=None):
    """Per-arm (adjusted) means and variances."""
    out = []
    for arm in (1, 0):
        in_arm = treat == arm
        if strata is None:
            sub = x[in_arm]
            m1 = sub.mean(axis=0)
            m2 = (sub * sub).mean(axis=0)
        else:
            m1 = np.zeros(x.shape[1])
            m2 = np.zeros(x.shape[1])
            for s, ws in stratum_weights.items():
                sub = x[in_arm & (strata == s)]
                m1 += ws * sub.mean(axis=0)
                m2 += ws * (sub * sub).mean(axis=0)
        var = np.where(continuous, np.maximum(m2 - m1 * m1, 0.0), m1 * (1.0 - m1))
        out.append((m1, var))
    return out


def _smd(stats):
    (mt, vt), (mc, vc) = stats
    pooled = np.sqrt((vt + vc) / 2.0)
    diff = mt - mc
    with np.errstate(divide="ignore", invalid="ignore"):
        smd = diff / pooled
        return np.where(pooled > 0, smd, np.where(diff == 0, 0.0, np.sign(diff) * np.inf))


def stratum_weights(strata, treatment, estimand="ATT") -> dict[int, float]:
    """Weights of the PS strata containing both arms, renormalized to sum to 1."""
    strata = np.asarray(strata)
    treatment = np.asarray(treatment)
    w = {}
    for s in np.unique(strata):
        in_s = strata == s
        nt = int(np.sum(treatment[in_s] == 1))
        nc = int(np.sum(treatment[in_s] == 0))
        if nt == 0 or nc == 0:
            continue
        w[int(s)] = float(nt if estimand == "ATT" else nt + nc)
    total = sum(w.values())
    return {s: v / total for s, v in w.items()} if total > 0 else {}


def compute_balance(design: Design, treatment, adjustment: str = "none", *,
                    matched=None, strata=None, estimand: str = "ATT",
                    names=None) -> list[BalanceRow]:
    """Standardized mean differences (treated minus comparator) before and after adjustment.

    Args:
        design: covariates of the subjects being compared.
        treatment: 0/1 arm per row.
        adjustment: ``"none"``, ``"matched-set"`` (requires ``matched`` mask) or
            ``"strata-with-weights"`` (requires ``strata`` labels).
    """
    x = design.x
    treat = np.asarray(treatment)
    if not ((treat == 1).any() and (treat == 0).any()):
        raise ValueError("both arms must be non-empty")
    cont = design.continuous
    before = _smd(_arm_stats(x, treat, cont))
    if adjustment == "none":
        after = before
    elif adjustment == "matched-set":
        mask = np.asarray(matched, bool)
        if not ((treat[mask] == 1).any() and (treat[mask] == 0).any()):
            after = np.full(x.shape[1], np.nan)
        else:
            after = _smd(_arm_stats(x[mask], treat[mask], cont))
    elif adjustment == "strata-with-weights":
        strata = np.asarray(strata)
        w = stratum_weights(strata, treat, estimand)
        after = (_smd(_arm_stats(x, treat, cont, strata, w)) if w
                 else np.full(x.shape[1], np.nan))
    else:
        raise ValueError(f"unknown adjustment {adjustment!r}")
    names = names or {}
    return [BalanceRow(int(c), float(b), float(a), names.get(int(c), str(int(c))))
            for c, b, a in zip(design.covariate_ids, before, after)]


def equipoise_fraction(preference, band=EQUIPOISE_BAND) -> float:
    pref = np.asarray(preference, float)
    if pref.size == 0:
        raise ValueError("no preference scores")
    lo, hi = band
    return float(np.mean((pref >= lo) & (pref <= hi)))
