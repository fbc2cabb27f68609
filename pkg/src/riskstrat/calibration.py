"""Negative-control estimates, empirical null fitting, calibrated p-values and
the per-stratum diagnostics verdict."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .survival import CoxError, fit_cox

log = logging.getLogger(__name__)

Z975 = float(stats.norm.ppf(0.975))


@dataclass
class NegativeControlEstimate:
    outcome_id: str
    log_hr: float
    se: float

    @property
    def p(self) -> float:
        return float(2.0 * stats.norm.sf(abs(self.log_hr) / self.se))


@dataclass
class EmpiricalNull:
    mu: float
    sigma: float
    n_controls: int
    mu_se: float = float("nan")

    def to_dict(self):
        return {"mu": self.mu, "sigma": self.sigma, "n_controls": self.n_controls,
                "mu_se": self.mu_se}


@dataclass
class Verdict:
    status: str  # "pass" | "fail" | "indeterminate"
    reasons: list[str] = field(default_factory=list)
    max_smd_after: float = float("nan")
    equipoise: float = float("nan")
    nc_significant_fraction: float = float("nan")

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def estimate_negative_controls(cohort, members, ps_strata, negative_control_ids,
                               horizon: int, ties: str = "efron"):
    """Stratified Cox HR for every negative control inside one risk stratum.

    Args:
        cohort: the full ``CohortTable``.
        members: row indices (into ``cohort``) of the risk stratum.
        ps_strata: PS stratum label per member, reused from the target analysis.

    Returns:
        ``(estimates, skipped)`` where ``skipped`` maps outcome id to the reason.
    """
    if not negative_control_ids:
        raise ValueError("negative control list is empty")
    members = np.asarray(members)
    ps_strata = np.asarray(ps_strata)
    treatment = cohort.treatment[members]
    estimates, skipped = [], {}
    for oid in negative_control_ids:
        if oid not in cohort.events:
            skipped[oid] = "outcome absent from bundle"
            continue
        keep = cohort.analyzable(oid)[members]
        time, event = cohort.time_to_event(oid, horizon)
        time, event = time[members][keep], event[members][keep]
        if not event.any():
            skipped[oid] = "zero events"
            continue
        try:
            b, se = fit_cox(time, event, treatment[keep], ps_strata[keep], ties=ties)
        except CoxError as exc:
            skipped[oid] = str(exc)
            continue
        estimates.append(NegativeControlEstimate(oid, b, se))
    return estimates, skipped


def _profile_loglik(sigma, y, se2):
    v = sigma * sigma + se2
    w = 1.0 / v
    mu = np.sum(w * y) / np.sum(w)
    ll = -0.5 * np.sum(np.log(2 * np.pi * v) + (y - mu) ** 2 / v)
    return ll, mu


def null_loglik(mu, sigma, log_hr, se) -> float:
    v = sigma * sigma + np.asarray(se, float) ** 2
    return float(-0.5 * np.sum(np.log(2 * np.pi * v) + (np.asarray(log_hr) - mu) ** 2 / v))


def fit_empirical_null(estimates, tol: float = 1e-8) -> EmpiricalNull:
    """Maximum-likelihood ``(mu, sigma)`` with ``log_hr_i ~ N(mu, sigma^2 + se_i^2)``.

    ``mu`` is profiled out in closed form; ``sigma >= 0`` is found by a grid
    scan followed by bounded Brent refinement.
    """
    y = np.array([e.log_hr for e in estimates], float)
    se = np.array([e.se for e in estimates], float)
    if len(y) < 5:
        raise ValueError(f"need at least 5 negative-control estimates, got {len(y)}")
    if not (np.all(np.isfinite(y)) and np.all(se > 0)):
        raise ValueError("estimates must be finite with se > 0")
    se2 = se * se
    upper = float(np.ptp(y) + y.std() + se.max()) + 1e-6
    grid = np.linspace(0.0, upper, 401)
    ll = np.array([_profile_loglik(s, y, se2)[0] for s in grid])
    k = int(np.argmax(ll))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    best_sigma, best_ll = grid[k], ll[k]
    if hi > lo:
        res = optimize.minimize_scalar(lambda s: -_profile_loglik(s, y, se2)[0],
                                       bounds=(lo, hi), method="bounded",
                                       options={"xatol": tol})
        if -res.fun >= best_ll:
            best_sigma, best_ll = float(res.x), -res.fun
    # boundary at sigma = 0 is a legitimate optimum
    ll0 = _profile_loglik(0.0, y, se2)[0]
    if ll0 >= best_ll:
        best_sigma = 0.0
    mu = _profile_loglik(best_sigma, y, se2)[1]
    mu_se = float(1.0 / np.sqrt(np.sum(1.0 / (best_sigma ** 2 + se2))))
    return EmpiricalNull(float(mu), float(best_sigma), int(len(y)), mu_se)


def calibrated_p(log_hr, se, null: EmpiricalNull):
    """Two-sided p-value of ``log_hr`` under ``N(mu, sigma^2 + se^2)``."""
    sd = np.sqrt(null.sigma ** 2 + np.asarray(se, float) ** 2)
    p = 2.0 * stats.norm.sf(np.abs(np.asarray(log_hr, float) - null.mu) / sd)
    return float(p) if np.ndim(p) == 0 else p


def diagnostics_verdict(balance, equipoise, nc_estimates, *, smd_threshold=0.1,
                        equipoise_threshold=0.2, alpha=0.05,
                        max_significant_fraction=0.10) -> Verdict:
    """Composite verdict: balance, preference-score overlap, negative controls.

    Any missing input makes the verdict ``indeterminate`` (and not passed).
    """
    v = Verdict("pass")
    missing = []
    if balance:
        smd = np.array([abs(r.smd_after) for r in balance], float)
        if np.isnan(smd).all():
            missing.append("balance after adjustment unavailable")
        else:
            v.max_smd_after = float(np.nanmax(smd))
            bad = [r for r in balance if abs(r.smd_after) > smd_threshold]
            if bad:
                worst = max(bad, key=lambda r: abs(r.smd_after))
                names = ", ".join(r.name or str(r.covariate_id) for r in bad[:5])
                v.reasons.append(f"balance: {len(bad)} covariate(s) with |SMD| > {smd_threshold} "
                                 f"after adjustment (max {abs(worst.smd_after):.3f}): {names}")
    else:
        missing.append("balance not computed")
    if equipoise is None or not np.isfinite(equipoise):
        missing.append("equipoise not computed")
    else:
        v.equipoise = float(equipoise)
        if equipoise < equipoise_threshold:
            v.reasons.append(f"equipoise: {equipoise:.3f} of subjects in preference band, "
                             f"below {equipoise_threshold}")
    if not nc_estimates:
        missing.append("no usable negative-control estimates")
    else:
        sig = np.mean([e.p < alpha for e in nc_estimates])
        v.nc_significant_fraction = float(sig)
        if sig > max_significant_fraction:
            v.reasons.append(f"negative controls: {sig:.0%} significant at alpha={alpha}, "
                             f"above {max_significant_fraction:.0%}")
    if v.reasons:
        v.status = "fail"
    if missing:
        v.reasons.extend(f"indeterminate: {m}" for m in missing)
        if v.status == "pass":
            v.status = "indeterminate"
    return v
