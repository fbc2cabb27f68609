"""Propensity-stratified relative and absolute effects inside one risk stratum."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .calibration import (EmpiricalNull, Verdict, calibrated_p, diagnostics_verdict,
                          estimate_negative_controls, fit_empirical_null)
from .cohort import CohortTable, CovariateTable
from .lasso import NoContrastError
from .propensity import (PsAssignment, compute_balance, equipoise_fraction,
                         estimate_propensity, stratify_ps)
from .settings import StudySettings, task_seed
from .survival import (CoxError, ard_at_horizon, fit_cox, km_curve, person_years)

log = logging.getLogger(__name__)

Z975 = 1.959963984540054


@dataclass
class StratumEffect:
    outcome_id: str
    risk_stratum: int | str
    log_hr: float = float("nan")
    se: float = float("nan")
    hr: float = float("nan")
    hr_lo: float = float("nan")
    hr_hi: float = float("nan")
    ard: float = float("nan")
    ard_lo: float = float("nan")
    ard_hi: float = float("nan")
    n_t: int = 0
    n_c: int = 0
    py_t: float = 0.0
    py_c: float = 0.0
    events_t: int = 0
    events_c: int = 0
    diagnostics_pass: bool = False
    diagnostics_status: str = "indeterminate"
    reasons: list[str] = field(default_factory=list)

    @property
    def hr_ci95(self):
        return self.hr_lo, self.hr_hi

    @property
    def ard_ci95(self):
        return self.ard_lo, self.ard_hi


@dataclass
class StratumResult:
    effect: StratumEffect
    ps: PsAssignment | None = None
    balance: list = field(default_factory=list)
    equipoise: float = float("nan")
    nc_estimates: list = field(default_factory=list)
    nc_skipped: dict = field(default_factory=dict)
    null: EmpiricalNull | None = None
    verdict: Verdict | None = None
    km: dict = field(default_factory=dict)


def estimate_stratum(cov: CovariateTable, cohort: CohortTable, outcome_id: str, members,
                     settings: StudySettings, label: int | str = 1, *,
                     negative_controls: bool = True) -> StratumResult:
    """Fresh PS model, PS strata, stratified Cox HR, weighted KM difference and diagnostics.

    Failures never raise: the returned effect carries NaN estimates and the
    reasons.
    """
    effect = StratumEffect(outcome_id, label)
    result = StratumResult(effect)
    rows = cohort.index_of(members)
    rows = np.sort(rows[cohort.analyzable(outcome_id)[rows]])
    treat = cohort.treatment[rows]
    horizon = settings.time_at_risk_days
    time, event = cohort.time_to_event(outcome_id, horizon)
    time, event = time[rows], event[rows]

    is_t = treat == 1
    effect.n_t, effect.n_c = int(is_t.sum()), int((~is_t).sum())
    effect.events_t, effect.events_c = int(event[is_t].sum()), int(event[~is_t].sum())
    fu = cohort.followup_days[rows]
    effect.py_t, effect.py_c = person_years(fu[is_t], horizon), person_years(fu[~is_t], horizon)
    for arm, name in ((1, "target"), (0, "comparator")):
        if (treat == arm).any():
            result.km[name] = km_curve(time[treat == arm], event[treat == arm])

    if effect.n_t == 0 or effect.n_c == 0:
        effect.reasons.append("estimation: stratum lacks one treatment arm")
        return result

    seed = task_seed(settings.seed, "stratum", outcome_id, label)
    design = cov.design(cohort.subject_ids[rows])
    try:
        ps, _ = estimate_propensity(design, treat, settings.cv_folds, settings.grid, seed)
    except (NoContrastError, ValueError) as exc:
        effect.reasons.append(f"propensity model: {exc}")
        return result
    assignment = PsAssignment.draft(design.subject_ids, treat, ps)
    reference = ps[is_t] if settings.estimand == "ATT" else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        strata = stratify_ps(ps, settings.ps_strata_count, reference)
    for w in caught:
        effect.reasons.append(f"ps strata: {w.message}")
    assignment.ps_stratum = strata
    result.ps = assignment

    try:
        b, se = fit_cox(time, event, treat, strata, ties=settings.ties)
        effect.log_hr, effect.se = b, se
        effect.hr = math.exp(b)
        effect.hr_lo, effect.hr_hi = math.exp(b - Z975 * se), math.exp(b + Z975 * se)
    except CoxError as exc:
        effect.reasons.append(f"cox: {exc}")

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ard = ard_at_horizon(time, event, treat, strata, horizon, settings.estimand,
                                 settings.bootstrap_reps, seed)
        effect.ard, effect.ard_lo, effect.ard_hi = ard.ard, ard.lo, ard.hi
    except ValueError as exc:
        effect.reasons.append(f"ard: {exc}")

    names = {c: m.name for c, m in cov.covariate_meta.items()}
    result.balance = compute_balance(design, treat, "strata-with-weights", strata=strata,
                                     estimand=settings.estimand, names=names)
    result.equipoise = equipoise_fraction(assignment.preference)

    if negative_controls and settings.negative_control_ids:
        result.nc_estimates, result.nc_skipped = estimate_negative_controls(
            cohort, rows, strata, list(settings.negative_control_ids), horizon, settings.ties)
        if len(result.nc_estimates) >= 5:
            result.null = fit_empirical_null(result.nc_estimates)

    result.verdict = diagnostics_verdict(
        result.balance, result.equipoise, result.nc_estimates,
        smd_threshold=settings.smd_threshold,
        equipoise_threshold=settings.equipoise_threshold,
        alpha=settings.nc_alpha,
        max_significant_fraction=settings.nc_max_significant_fraction)
    effect.diagnostics_status = result.verdict.status
    effect.diagnostics_pass = result.verdict.passed
    effect.reasons.extend(result.verdict.reasons)
    return result


def nc_rows(result: StratumResult):
    """``(outcome_id, log_hr, se, p, calibrated_p)`` per negative control."""
    out = []
    for e in result.nc_estimates:
        cp = calibrated_p(e.log_hr, e.se, result.null) if result.null else float("nan")
        out.append((e.outcome_id, e.log_hr, e.se, e.p, cp))
    return out
