"""Synthetic observational cohorts with known confounding and known effects.

Random draws come from counter-based Philox streams keyed by ``(seed, purpose)``.
Subject ``i`` always consumes the ``i``-th block of its stream, so generating
any subset of subjects (in any order, in any worker) reproduces the same
values as one sequential pass.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cohort import NO_EVENT, CohortTable, CovariateMeta, CovariateTable

_PHILOX_BLOCK = 4  # 64-bit outputs per Philox counter increment


@dataclass
class OutcomeModel:
    baseline_log_hazard: float
    covariate_log_hazard: dict[int, float] = field(default_factory=dict)
    # One log HR per quartile of true risk (lowest first); a single value means constant.
    true_log_hr: list[float] = field(default_factory=lambda: [0.0])
    prior_prevalence: float = 0.0

    def log_hr_for_quartile(self, quartile: np.ndarray) -> np.ndarray:
        vals = np.asarray(self.true_log_hr, dtype=float)
        if len(vals) == 1:
            return np.full(len(quartile), vals[0])
        if len(vals) != 4:
            raise ValueError("true_log_hr needs 1 or 4 values")
        return vals[quartile - 1]


@dataclass
class SimulationSpec:
    n_subjects: int
    n_binary_covariates: int
    covariate_prevalences: list[float]
    treatment_intercept: float = 0.0
    treatment_coefficients: dict[int, float] = field(default_factory=dict)
    outcome_models: dict[str, OutcomeModel] = field(default_factory=dict)
    censoring_rate: float = 0.0
    admin_censor_day: int = 1095
    negative_control_count: int = 0
    negative_control_model: OutcomeModel | None = None
    # Covariates generated and used by the models but left out of the bundle.
    hidden_covariates: list[int] = field(default_factory=list)
    time_at_risk_days: int = 730
    seed: int = 0

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if len(self.covariate_prevalences) != self.n_binary_covariates:
            raise ValueError("covariate_prevalences must have n_binary_covariates entries")
        p = np.asarray(self.covariate_prevalences, dtype=float)
        if p.size and not ((p > 0) & (p < 1)).all():
            raise ValueError("prevalences must lie strictly inside (0, 1)")
        models = dict(self.outcome_models)
        if self.negative_control_count:
            if self.negative_control_model is None:
                raise ValueError("negative_control_model required when negative_control_count > 0")
            if any(v != 0 for v in self.negative_control_model.true_log_hr):
                raise ValueError("negative-control outcome models must have true_log_hr == 0")
            models["nc"] = self.negative_control_model
        if not models:
            raise ValueError("at least one outcome model is required")
        for oid, m in models.items():
            for j in m.covariate_log_hazard:
                if not 0 <= j < self.n_binary_covariates:
                    raise ValueError(f"outcome {oid}: covariate index {j} out of range")
            if not np.isfinite(m.baseline_log_hazard) or np.exp(m.baseline_log_hazard) == 0:
                raise ValueError(f"outcome {oid}: degenerate (all-zero) hazard")
        for j in self.treatment_coefficients:
            if not 0 <= j < self.n_binary_covariates:
                raise ValueError(f"treatment covariate index {j} out of range")
        if self.censoring_rate < 0:
            raise ValueError("censoring_rate must be >= 0")

    @property
    def negative_control_ids(self) -> list[str]:
        width = max(2, len(str(self.negative_control_count)))
        return [f"nc{i + 1:0{width}d}" for i in range(self.negative_control_count)]

    def all_outcome_models(self) -> dict[str, OutcomeModel]:
        models = dict(self.outcome_models)
        for oid in self.negative_control_ids:
            models[oid] = self.negative_control_model
        return models

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationSpec":
        d = dict(d)

        def _model(m):
            m = dict(m)
            m["covariate_log_hazard"] = {int(k): float(v)
                                         for k, v in m.get("covariate_log_hazard", {}).items()}
            hr = m.get("true_log_hr", [0.0])
            m["true_log_hr"] = [float(hr)] if np.isscalar(hr) else [float(v) for v in hr]
            return OutcomeModel(**m)

        d["treatment_coefficients"] = {int(k): float(v)
                                       for k, v in d.get("treatment_coefficients", {}).items()}
        d["outcome_models"] = {str(k): _model(v) for k, v in d.get("outcome_models", {}).items()}
        if d.get("negative_control_model") is not None:
            d["negative_control_model"] = _model(d["negative_control_model"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SimulationSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TruthRecord:
    """Data-generating quantities per subject and outcome."""

    subject_ids: np.ndarray
    true_propensity: np.ndarray
    true_risk: dict[str, np.ndarray]
    true_log_hr: dict[str, np.ndarray]
    horizon: int

    def true_ard(self, outcome_id: str, mask=None) -> float:
        """Mean true risk difference (comparator minus treated) at the horizon, in percentage points."""
        r = self.true_risk[outcome_id]
        hr = np.exp(self.true_log_hr[outcome_id])
        if mask is not None:
            r, hr = r[mask], hr[mask]
        surv_c = 1.0 - r
        surv_t = surv_c ** hr
        return float(100.0 * np.mean(surv_t - surv_c))

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("subject_id,true_risk,outcome_id,true_log_hr\n")
            for oid in sorted(self.true_risk):
                r, h = self.true_risk[oid], self.true_log_hr[oid]
                fh.writelines(f"{s},{ri!r},{oid},{hi!r}\n" for s, ri, hi in
                              zip(self.subject_ids.tolist(), r.tolist(), h.tolist()))


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, start: int = 0) -> np.random.Generator:
    """Philox generator for ``(seed, purpose)`` advanced to subject ``start``."""
    bitgen = np.random.Philox(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF,
                                                     _purpose_key(purpose)]))
    if start:
        bitgen = bitgen.advance(start)
    return np.random.Generator(bitgen)


def _uniforms(seed: int, purpose: str, n: int, start: int = 0) -> np.ndarray:
    """One uniform per subject from its own Philox counter block."""
    raw = stream(seed, purpose, start).bit_generator.random_raw(n * _PHILOX_BLOCK)
    raw = raw.reshape(n, _PHILOX_BLOCK)[:, 0]
    # 53-bit mantissa, strictly inside (0, 1)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) / 9007199254740992.0


def true_risk(spec_or_model, covariate_row, time_at_risk: int | None = None,
              outcome_id: str | None = None) -> float:
    """Risk of the outcome within ``time_at_risk`` days absent treatment."""
    if isinstance(spec_or_model, SimulationSpec):
        model = spec_or_model.all_outcome_models()[
            outcome_id or next(iter(spec_or_model.outcome_models))]
        horizon = spec_or_model.time_at_risk_days if time_at_risk is None else time_at_risk
    else:
        model = spec_or_model
        horizon = 730 if time_at_risk is None else time_at_risk
    x = np.asarray(covariate_row, dtype=float)
    lin = model.baseline_log_hazard + sum(g * x[j] for j, g in model.covariate_log_hazard.items())
    return float(-np.expm1(-horizon * np.exp(lin)))


def _linear(coefs: dict[int, float], x: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[0])
    for j, b in coefs.items():
        out += b * x[:, j]
    return out


def _risk_quartile(risk: np.ndarray) -> np.ndarray:
    cuts = np.quantile(risk, [0.25, 0.5, 0.75])
    return 1 + np.searchsorted(cuts, risk, side="left")


def simulate(spec: SimulationSpec):
    """Draw one dataset. Returns ``(CovariateTable, CohortTable, TruthRecord)``."""
    spec.validate()
    n, p, seed = spec.n_subjects, spec.n_binary_covariates, spec.seed
    subject_ids = np.arange(1, n + 1, dtype=np.int64)

    x = np.empty((n, p))
    for j, prev in enumerate(spec.covariate_prevalences):
        x[:, j] = _uniforms(seed, f"covariate/{j}", n) < prev

    ps = 1.0 / (1.0 + np.exp(-(spec.treatment_intercept + _linear(spec.treatment_coefficients, x))))
    treatment = (_uniforms(seed, "treatment", n) < ps).astype(np.int8)

    if spec.censoring_rate > 0:
        censor = np.ceil(-np.log(_uniforms(seed, "censor", n)) / spec.censoring_rate)
        followup = np.minimum(censor, spec.admin_censor_day).astype(np.int64)
    else:
        followup = np.full(n, spec.admin_censor_day, dtype=np.int64)

    events, prior, risks, log_hrs = {}, {}, {}, {}
    for oid, model in spec.all_outcome_models().items():
        lin = model.baseline_log_hazard + _linear(model.covariate_log_hazard, x)
        risk = -np.expm1(-spec.time_at_risk_days * np.exp(lin))
        loghr = model.log_hr_for_quartile(_risk_quartile(risk))
        hazard = np.exp(lin + treatment * loghr)
        t = np.ceil(-np.log(_uniforms(seed, f"event/{oid}", n)) / hazard)
        day = np.where(t <= followup, t, NO_EVENT).astype(np.int64)
        events[oid] = day
        if model.prior_prevalence > 0:
            prior[oid] = _uniforms(seed, f"prior/{oid}", n) < model.prior_prevalence
        else:
            prior[oid] = np.zeros(n, dtype=bool)
        risks[oid] = risk
        log_hrs[oid] = loghr

    observed = [j for j in range(p) if j not in set(spec.hidden_covariates)]
    rows, cols = np.nonzero(x[:, observed])
    cov_ids = np.asarray(observed, dtype=np.int64)[cols] + 1
    meta = {int(c): CovariateMeta(f"cov{int(c)}", "binary") for c in np.unique(cov_ids)}
    cov = CovariateTable.from_entries(subject_ids, subject_ids[rows], cov_ids,
                                      np.ones(len(rows)), meta)
    cohort = CohortTable.build(subject_ids, treatment, followup, events, prior)
    truth = TruthRecord(subject_ids, ps, risks, log_hrs, spec.time_at_risk_days)
    return cov, cohort, truth
