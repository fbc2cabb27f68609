"""Baseline-risk model development on the matched subset and risk stratification."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cohort import CohortTable, CovariateTable, Design
from .lasso import SparseLinearModel, fit_lasso_cv, performance_summary, predict_proba
from .propensity import PsAssignment, estimate_propensity, match_caliper
from .settings import StudySettings, task_seed

log = logging.getLogger(__name__)

POPULATIONS = ("matched", "treatment", "comparator", "entire")


class InsufficientEventsError(ValueError):
    pass


class RiskStrataError(ValueError):
    pass


@dataclass
class RiskStrata:
    boundaries: np.ndarray
    subject_ids: np.ndarray
    stratum: np.ndarray
    model: SparseLinearModel | None = None
    performance: list = field(default_factory=list)
    predictions: np.ndarray | None = None

    @property
    def assignment(self) -> dict[int, int]:
        return dict(zip(self.subject_ids.tolist(), self.stratum.tolist()))

    def members(self, k: int) -> np.ndarray:
        return self.subject_ids[self.stratum == k]


def outcome_labels(cohort: CohortTable, outcome_id: str, settings: StudySettings):
    """Binary label (event within time at risk) and the mask of usable subjects.

    Subjects with a prior occurrence are dropped. Early-censored non-events are
    kept as negatives unless ``settings.drop_early_censored``.
    """
    time, event = cohort.time_to_event(outcome_id, settings.time_at_risk_days)
    keep = cohort.analyzable(outcome_id).copy()
    if settings.drop_early_censored:
        keep &= event | (time >= settings.time_at_risk_days)
    return event.astype(float), keep


def _subset(design: Design, mask) -> Design:
    return Design(design.x[mask], design.subject_ids[mask], design.covariate_ids,
                  design.continuous)


def develop_risk_model_with_matching(cov: CovariateTable, cohort: CohortTable,
                                     outcome_id: str, settings: StudySettings):
    """Fit the risk model on the 1:1 PS-matched, prior-outcome-free subset.

    Returns ``(model, ps_assignment)``; the assignment covers all subjects
    without a prior outcome.
    """
    if outcome_id not in cohort.events:
        raise KeyError(f"outcome {outcome_id!r} not present in cohort")
    labels, keep = outcome_labels(cohort, outcome_id, settings)
    idx = np.flatnonzero(keep)
    design = cov.design(cohort.subject_ids[idx])
    treat = cohort.treatment[idx]
    seed = task_seed(settings.seed, "risk-ps", outcome_id)
    ps, _ = estimate_propensity(design, treat, settings.cv_folds, settings.grid, seed)
    assignment = match_caliper(PsAssignment.draft(design.subject_ids, treat, ps),
                               settings.caliper, seed)
    m = assignment.matched
    if not m.any():
        raise InsufficientEventsError("matched development subset is empty")
    y = labels[idx][m]
    if y.sum() < settings.min_events:
        raise InsufficientEventsError(
            f"insufficient events: {int(y.sum())} in matched development set "
            f"(minimum {settings.min_events})")
    model = fit_lasso_cv(_subset(design, m), y, settings.cv_folds, settings.grid,
                         seed=task_seed(settings.seed, "risk-model", outcome_id))
    model.development_subjects = design.subject_ids[m]
    return model, assignment


def develop_risk_model(cov, cohort, outcome_id, settings) -> SparseLinearModel:
    return develop_risk_model_with_matching(cov, cohort, outcome_id, settings)[0]


def evaluate_risk_model(model: SparseLinearModel, cov: CovariateTable, cohort: CohortTable,
                        outcome_id: str, settings: StudySettings, matched_subjects=None):
    """c-statistic and calibration in the matched, treatment, comparator and entire populations."""
    labels, keep = outcome_labels(cohort, outcome_id, settings)
    if matched_subjects is None:
        matched_subjects = model.development_subjects
    if matched_subjects is None:
        _, assignment = _matching_only(cov, cohort, outcome_id, settings, keep)
        matched_subjects = assignment.matched_subjects()
    pred = predict_proba(model, cov, cohort.subject_ids)
    matched = np.isin(cohort.subject_ids, matched_subjects) & keep
    masks = {
        "matched": matched,
        "treatment": keep & (cohort.treatment == 1),
        "comparator": keep & (cohort.treatment == 0),
        "entire": keep,
    }
    return [performance_summary(pred[masks[p]], labels[masks[p]], p) for p in POPULATIONS]


def _matching_only(cov, cohort, outcome_id, settings, keep):
    idx = np.flatnonzero(keep)
    design = cov.design(cohort.subject_ids[idx])
    treat = cohort.treatment[idx]
    seed = task_seed(settings.seed, "risk-ps", outcome_id)
    ps, _ = estimate_propensity(design, treat, settings.cv_folds, settings.grid, seed)
    return design, match_caliper(PsAssignment.draft(design.subject_ids, treat, ps),
                                 settings.caliper, seed)


def assign_risk_strata(predictions, k: int, subject_ids=None) -> RiskStrata:
    """Cut pooled predicted risk at its k-quantiles; boundary ties go to the lower stratum."""
    pred = np.asarray(predictions, float)
    if k < 2:
        raise RiskStrataError("risk_strata_count must be >= 2")
    if pred.size == 0:
        raise RiskStrataError("no predictions to stratify")
    if np.unique(pred).size < k:
        raise RiskStrataError(
            f"only {np.unique(pred).size} distinct predicted risks for {k} strata; "
            "reduce risk_strata_count")
    bounds = np.quantile(pred, np.arange(1, k) / k)
    stratum = 1 + np.searchsorted(bounds, pred, side="left")
    sizes = np.bincount(stratum, minlength=k + 1)[1:]
    if (np.diff(bounds) <= 0).any() or (sizes == 0).any():
        raise RiskStrataError(
            f"tied predicted risks leave empty or degenerate strata (sizes {sizes.tolist()}); "
            "reduce risk_strata_count")
    ids = np.arange(len(pred)) if subject_ids is None else np.asarray(subject_ids, np.int64)
    return RiskStrata(bounds, ids, stratum.astype(np.int64), predictions=pred)


def stratify_by_risk(model, cov, cohort, outcome_id, settings) -> RiskStrata:
    """Predict risk for every analyzable subject and assign risk strata."""
    keep = cohort.analyzable(outcome_id)
    ids = cohort.subject_ids[keep]
    pred = predict_proba(model, cov, ids)
    strata = assign_risk_strata(pred, settings.risk_strata_count, ids)
    strata.model = model
    return strata
