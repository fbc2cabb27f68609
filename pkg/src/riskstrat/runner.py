"""Study orchestration: config validation, the end-to-end pipeline and the report bundle."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd

from . import __version__
from .calibration import calibrated_p
from .cohort import CohortTable, CovariateTable, load_bundle
from .estimation import StratumResult, estimate_stratum
from .lasso import SparseLinearModel
from .risk import (RiskStrata, _matching_only, develop_risk_model_with_matching,
                   evaluate_risk_model, outcome_labels, stratify_by_risk)
from .settings import StudySettings

log = logging.getLogger(__name__)

OVERALL = "overall"

ESTIMATE_COLUMNS = ["outcome_id", "risk_stratum", "hr", "hr_lo", "hr_hi", "ard", "ard_lo",
                    "ard_hi", "n_t", "n_c", "py_t", "py_c", "events_t", "events_c",
                    "diagnostics_pass"]
BALANCE_COLUMNS = ["outcome_id", "risk_stratum", "covariate_id", "name", "smd_before",
                   "smd_after"]
PS_COLUMNS = ["outcome_id", "risk_stratum", "subject_id", "propensity", "preference",
              "match_partner", "ps_stratum", "treatment"]
RISK_COLUMNS = ["subject_id", "outcome_id", "predicted_risk", "risk_stratum"]
NC_COLUMNS = ["target_outcome_id", "risk_stratum", "outcome_id", "log_hr", "se", "p",
              "calibrated_p"]
VERDICT_COLUMNS = ["outcome_id", "risk_stratum", "status", "diagnostics_pass",
                   "max_smd_after", "equipoise", "nc_significant_fraction", "reasons"]
KM_COLUMNS = ["outcome_id", "risk_stratum", "arm", "time", "survival", "std_err",
              "n_at_risk", "n_events"]
PERFORMANCE_COLUMNS = ["outcome_id", "population_label", "n", "n_events", "c_statistic",
                       "c_lo", "c_hi", "calibration_intercept", "calibration_slope", "flag"]
EXCLUSION_COLUMNS = ["subject_id", "outcome_id", "reason"]


class StudyError(RuntimeError):
    """Fatal pipeline failure, located by step, outcome and stratum."""

    def __init__(self, step, outcome=None, stratum=None, message=""):
        self.step, self.outcome, self.stratum, self.message = step, outcome, stratum, message
        where = ", ".join(f"{k}={v}" for k, v in
                          (("step", step), ("outcome", outcome), ("stratum", stratum))
                          if v is not None)
        super().__init__(f"[{where}] {message}")

    def __reduce__(self):
        return StudyError, (self.step, self.outcome, self.stratum, self.message)

    def to_dict(self):
        return {"step": self.step, "outcome": self.outcome, "stratum": self.stratum,
                "message": self.message}


def _schema(name: str) -> dict:
    return json.loads(resources.files("riskstrat").joinpath("schemas", name).read_text())


def config_schema() -> dict:
    return _schema("study_config.schema.json")


def report_schema() -> dict:
    return _schema("report.schema.json")


@dataclass
class StudyConfig:
    covariates: Path
    cohort: Path
    outcomes: Path
    settings: StudySettings
    output_dir: Path | None = None
    emit_km_curves: bool = True
    workers: int = 1
    external_models: dict = field(default_factory=dict)  # outcome id -> resolved path
    raw: dict = field(default_factory=dict)

    def echo(self) -> dict:
        """Config as recorded in the report: no output location, no worker count."""
        return {
            "bundle": dict(self.raw.get("bundle", {})),
            "settings": self.settings.to_dict(),
            "report": {"emit_km_curves": self.emit_km_curves,
                       "bootstrap_reps": self.settings.bootstrap_reps},
        }


def _path_error(e: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in e.absolute_path) or "<root>"
    return f"{where}: {e.message}"


def apply_overrides(raw: dict, overrides: dict | None) -> dict:
    """Merge dotted-key overrides (``settings.seed``, ``report.bootstrap_reps``) into raw."""
    out = json.loads(json.dumps(raw))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def parse_config(raw: dict, base_dir: Path) -> tuple[StudyConfig | None, list[str]]:
    errors = [_path_error(e) for e in
              sorted(jsonschema.Draft202012Validator(config_schema()).iter_errors(raw),
                     key=lambda e: list(map(str, e.absolute_path)))]
    if errors:
        return None, errors
    paths = {}
    for key in ("covariates", "cohort", "outcomes"):
        p = Path(raw["bundle"][key])
        p = p if p.is_absolute() else base_dir / p
        if not p.is_file():
            errors.append(f"bundle/{key}: file not found: {p}")
        paths[key] = p
    settings_raw = dict(raw["settings"])
    report = raw.get("report", {})
    if "bootstrap_reps" in report:
        settings_raw["bootstrap_reps"] = report["bootstrap_reps"]
    external = {}
    for oid, p in settings_raw.get("external_models", {}).items():
        p = Path(p)
        p = p if p.is_absolute() else base_dir / p
        if not p.is_file():
            errors.append(f"settings/external_models/{oid}: file not found: {p}")
        elif oid not in settings_raw.get("outcome_ids", []):
            errors.append(f"settings/external_models/{oid}: not a configured outcome")
        external[oid] = p
    settings_raw["external_models"] = {k: str(v) for k, v in external.items()}
    try:
        settings = StudySettings.from_dict(settings_raw)
    except (TypeError, ValueError) as exc:
        return None, errors + [f"settings: {exc}"]
    errors += [f"settings: {e}" for e in settings.errors()]
    if len(set(settings.outcome_ids)) != len(settings.outcome_ids):
        errors.append("settings: duplicate outcome ids")
    if errors:
        return None, errors
    out = raw.get("output_dir")
    cfg = StudyConfig(paths["covariates"], paths["cohort"], paths["outcomes"], settings,
                      output_dir=None if out is None else base_dir / out,
                      emit_km_curves=report.get("emit_km_curves", True),
                      workers=raw.get("workers", 1), external_models=external, raw=raw)
    # keep relative model paths in the echo so reports do not depend on checkout location
    cfg.settings = StudySettings.from_dict(
        {**settings.to_dict(),
         "external_models": dict(raw["settings"].get("external_models", {}))})
    return cfg, []


def validate_config(path, overrides: dict | None = None):
    """Structural and semantic validation; returns ``(config or None, errors)``."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        return None, [f"cannot read {path}: {exc}"]
    except json.JSONDecodeError as exc:
        return None, [f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}"]
    return parse_config(apply_overrides(raw, overrides), path.resolve().parent)


# --------------------------------------------------------------- workers

_STATE: dict = {}


def _init_worker(cov, cohort, settings, external):
    _STATE.update(cov=cov, cohort=cohort, settings=settings, external=external)


@dataclass
class OutcomeStage:
    outcome_id: str
    model: SparseLinearModel
    source: str
    performance: list
    strata: RiskStrata
    partners: dict  # subject id -> development match partner


def _risk_task(oid: str) -> OutcomeStage:
    cov, cohort, settings = _STATE["cov"], _STATE["cohort"], _STATE["settings"]
    external = _STATE["external"]
    step = "risk-model"
    try:
        if oid in external:
            model = SparseLinearModel.load(external[oid])
            _, keep = outcome_labels(cohort, oid, settings)
            _, assignment = _matching_only(cov, cohort, oid, settings, keep)
            model.development_subjects = assignment.matched_subjects()
            source = "external"
        else:
            model, assignment = develop_risk_model_with_matching(cov, cohort, oid, settings)
            source = "developed"
        step = "risk-evaluation"
        perf = evaluate_risk_model(model, cov, cohort, oid, settings)
        step = "risk-strata"
        strata = stratify_by_risk(model, cov, cohort, oid, settings)
    except StudyError:
        raise
    except Exception as exc:
        raise StudyError(step, oid, None, f"{type(exc).__name__}: {exc}") from None
    m = assignment.matched & (assignment.treatment == 1)
    partners = dict(zip(assignment.subject_ids[m].tolist(),
                        assignment.match_partner[m].tolist()))
    partners.update({c: t for t, c in list(partners.items())})
    return OutcomeStage(oid, model, source, perf, strata, partners)


def _stratum_task(oid: str, label, members) -> StratumResult:
    try:
        return estimate_stratum(_STATE["cov"], _STATE["cohort"], oid, members,
                                _STATE["settings"], label)
    except Exception as exc:
        raise StudyError("estimation", oid, label, f"{type(exc).__name__}: {exc}") from None


def _map(pool, fn, args_list):
    if pool is None:
        return [fn(*a) for a in args_list]
    futures = [pool.submit(fn, *a) for a in args_list]
    return [f.result() for f in futures]


# --------------------------------------------------------------- report

@dataclass
class ReportBundle:
    report: dict
    tables: dict  # csv name -> DataFrame
    nulls: dict  # file name -> dict
    models: dict  # file name -> dict
    output_dir: Path | None = None

    @property
    def all_diagnostics_pass(self) -> bool:
        return bool(self.report["all_diagnostics_pass"])

    @property
    def exit_code(self) -> int:
        return 0 if self.all_diagnostics_pass else 2

    def write(self, output_dir) -> Path:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, df in self.tables.items():
            df.to_csv(out / name, index=False, lineterminator="\n")
        for name, d in {**self.nulls, **self.models}.items():
            (out / name).write_text(dumps(d))
        (out / "report.json").write_text(dumps(self.report))
        self.output_dir = out
        return out


def jsonable(x):
    """Plain JSON types; non-finite floats become null."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    return x


def dumps(d) -> str:
    return json.dumps(jsonable(d), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _effect_dict(e) -> dict:
    keys = ["log_hr", "se", "hr", "hr_lo", "hr_hi", "ard", "ard_lo", "ard_hi", "n_t", "n_c",
            "py_t", "py_c", "events_t", "events_c", "diagnostics_pass"]
    return {k: getattr(e, k) for k in keys}


def _stratum_dict(r: StratumResult) -> dict:
    e = r.effect
    v = r.verdict
    verdict = ({"status": v.status, "reasons": list(v.reasons), "max_smd_after": v.max_smd_after,
                "equipoise": v.equipoise, "nc_significant_fraction": v.nc_significant_fraction}
               if v is not None else {"status": "indeterminate", "reasons": list(e.reasons)})
    if v is not None:
        # estimation failures are reasons too
        verdict["reasons"] = list(e.reasons)
    ncs = [{"outcome_id": n.outcome_id, "log_hr": n.log_hr, "se": n.se, "p": n.p,
            "calibrated_p": calibrated_p(n.log_hr, n.se, r.null) if r.null else None}
           for n in r.nc_estimates]
    return {"outcome_id": e.outcome_id, "risk_stratum": e.risk_stratum,
            "effect": _effect_dict(e), "verdict": verdict,
            "null": r.null.to_dict() if r.null else None,
            "negative_controls": ncs,
            "negative_controls_skipped": dict(sorted(r.nc_skipped.items()))}


def _perf_dict(p) -> dict:
    return {"population_label": p.population_label, "n": p.n, "n_events": p.n_events,
            "c_statistic": p.c_statistic, "c_lo": p.c_lo, "c_hi": p.c_hi,
            "calibration_intercept": p.calibration_intercept,
            "calibration_slope": p.calibration_slope, "ci_method": "DeLong", "flag": p.flag}


def _frame(rows, columns) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=columns)


def build_report(config: StudyConfig, cohort: CohortTable, stages: list[OutcomeStage],
                 results: dict, cov: CovariateTable) -> ReportBundle:
    settings = config.settings
    outcomes = []
    est, bal, ps_rows, risk_rows, nc, ver, km, perf_rows, excl = ([] for _ in range(9))
    nulls, models = {}, {}
    all_pass = True
    for stage in stages:
        oid = stage.outcome_id
        labels = list(range(1, settings.risk_strata_count + 1)) + [OVERALL]
        strata_dicts = []
        for label in labels:
            r = results[(oid, label)]
            d = _stratum_dict(r)
            e = r.effect
            all_pass &= bool(e.diagnostics_pass)
            est.append([oid, label] + [getattr(e, k) for k in ESTIMATE_COLUMNS[2:]])
            ver.append([oid, label, d["verdict"]["status"], e.diagnostics_pass,
                        d["verdict"].get("max_smd_after"), d["verdict"].get("equipoise"),
                        d["verdict"].get("nc_significant_fraction"),
                        "; ".join(d["verdict"]["reasons"])])
            for b in r.balance:
                bal.append([oid, label, b.covariate_id, b.name, b.smd_before, b.smd_after])
            if r.ps is not None:
                partner = [stage.partners.get(s) for s in r.ps.subject_ids.tolist()]
                ps_rows.append(pd.DataFrame({
                    "outcome_id": oid, "risk_stratum": label, "subject_id": r.ps.subject_ids,
                    "propensity": r.ps.propensity, "preference": r.ps.preference,
                    "match_partner": pd.array(partner, dtype="Int64"),
                    "ps_stratum": r.ps.ps_stratum, "treatment": r.ps.treatment}))
            for n in d["negative_controls"]:
                nc.append([oid, label, n["outcome_id"], n["log_hr"], n["se"], n["p"],
                           n["calibrated_p"]])
            if r.null is not None:
                nulls[f"null_{oid}_{label}.json"] = r.null.to_dict()
            if config.emit_km_curves:
                for arm, curve in sorted(r.km.items()):
                    for t, s, v, n_r, n_e in zip(curve.event_times, curve.survival,
                                                 curve.greenwood_var, curve.n_at_risk,
                                                 curve.n_events):
                        km.append([oid, label, arm, int(t), float(s), math.sqrt(v),
                                   int(n_r), int(n_e)])
            if label == OVERALL:
                overall = d
            else:
                strata_dicts.append(d)
        st = stage.strata
        risk_rows.append(pd.DataFrame({"subject_id": st.subject_ids, "outcome_id": oid,
                                       "predicted_risk": st.predictions,
                                       "risk_stratum": st.stratum}))
        prior = ~cohort.analyzable(oid)
        for s in cohort.subject_ids[prior].tolist():
            excl.append([s, oid, "prior outcome"])
        for p in stage.performance:
            perf_rows.append([oid] + [_perf_dict(p)[k] for k in PERFORMANCE_COLUMNS[1:]])
        model_d = stage.model.to_dict()
        models[f"model_{oid}.json"] = model_d
        outcomes.append({
            "outcome_id": oid,
            "risk_model": {**model_d, "source": stage.source,
                           "training_meta": stage.model.training_meta},
            "performance": [_perf_dict(p) for p in stage.performance],
            "risk_boundaries": st.boundaries.tolist(),
            "stratum_sizes": np.bincount(st.stratum, minlength=settings.risk_strata_count
                                         + 1)[1:].tolist(),
            "strata": strata_dicts,
            "overall": overall,
            "exclusions": {"prior outcome": int(prior.sum())},
        })
    report = {"version": __version__, "seed": settings.seed, "config": config.echo(),
              "all_diagnostics_pass": bool(all_pass), "outcomes": outcomes,
              "n_subjects": len(cohort), "n_covariates": int(len(cov.covariate_ids))}
    report = jsonable(report)
    jsonschema.validate(report, report_schema())

    def cat(frames, columns):
        return pd.concat(frames, ignore_index=True) if frames else _frame([], columns)

    tables = {
        "estimates.csv": _frame(est, ESTIMATE_COLUMNS),
        "verdicts.csv": _frame(ver, VERDICT_COLUMNS),
        "balance.csv": _frame(bal, BALANCE_COLUMNS),
        "ps.csv": cat(ps_rows, PS_COLUMNS),
        "risk.csv": cat(risk_rows, RISK_COLUMNS),
        "ncs.csv": _frame(nc, NC_COLUMNS),
        "performance.csv": _frame(perf_rows, PERFORMANCE_COLUMNS),
        "exclusions.csv": _frame(excl, EXCLUSION_COLUMNS),
    }
    if config.emit_km_curves:
        tables["km.csv"] = _frame(km, KM_COLUMNS)
    return ReportBundle(report, tables, nulls, models)


# --------------------------------------------------------------- pipeline

def run_study(config: StudyConfig, workers: int | None = None, output_dir=None,
              data: tuple[CovariateTable, CohortTable] | None = None) -> ReportBundle:
    """load -> risk model per outcome -> risk strata -> per-stratum estimation -> report.

    Results do not depend on ``workers``. Raises ``StudyError`` on fatal failures.
    """
    settings = config.settings
    workers = workers or config.workers or 1
    if data is None:
        try:
            cov, cohort = load_bundle(config.covariates, config.cohort, config.outcomes)
        except Exception as exc:
            raise StudyError("load", message=str(exc)) from None
    else:
        cov, cohort = data
    wanted = list(settings.outcome_ids) + list(settings.negative_control_ids)
    missing = [o for o in settings.outcome_ids if o not in cohort.events]
    if missing:
        raise StudyError("load", missing[0], None, "outcome not present in bundle")
    if not np.isin(cohort.subject_ids, cov.subject_ids).all():
        raise StudyError("load", message="cohort subjects missing from covariate table")
    log.info("loaded %d subjects, %d covariates, %d outcomes", len(cohort),
             len(cov.covariate_ids), len(wanted))

    external = {k: str(v) for k, v in config.external_models.items()}
    init = (cov, cohort, settings, external)
    pool = None
    if workers > 1:
        pool = ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                   initargs=init)
    else:
        _init_worker(*init)
    try:
        stages = _map(pool, _risk_task, [(o,) for o in settings.outcome_ids])
        tasks = []
        for stage in stages:
            for k in range(1, settings.risk_strata_count + 1):
                tasks.append((stage.outcome_id, k, stage.strata.members(k)))
            tasks.append((stage.outcome_id, OVERALL, stage.strata.subject_ids))
        out = _map(pool, _stratum_task, tasks)
    finally:
        if pool is not None:
            pool.shutdown()
        else:
            _STATE.clear()
    results = {(t[0], t[1]): r for t, r in zip(tasks, out)}
    bundle = build_report(config, cohort, stages, results, cov)
    target = output_dir or config.output_dir
    if target is not None:
        bundle.write(target)
    return bundle


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
