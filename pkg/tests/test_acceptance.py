"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Scenarios are simulator-anchored; all seeds are fixed so results are
reproducible.  Criterion 4 is the long one (100 replicates at n = 100 000).
"""

import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from riskstrat.calibration import (NegativeControlEstimate, calibrated_p, fit_empirical_null)
from riskstrat.cohort import write_bundle
from riskstrat.estimation import estimate_stratum
from riskstrat.lasso import (coefficient_vector, fit_logistic_lasso, lambda_max,
                             penalty_scale, predict_proba)
from riskstrat.propensity import compute_balance
from riskstrat.risk import (develop_risk_model_with_matching, evaluate_risk_model,
                            stratify_by_risk)
from riskstrat.runner import run_study, validate_config
from riskstrat.settings import StudySettings
from riskstrat.simulator import OutcomeModel, SimulationSpec, simulate
from riskstrat.survival import cox_partial_loglik, fit_cox, km_curve

from oracles import (efron_partial_loglik, grid_maximize, lasso_objective,
                     projected_gradient_lasso)

REPO = Path(__file__).resolve().parents[1]
Z975 = stats.norm.ppf(0.975)


@pytest.fixture
def verdict(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, detail
    return emit


# ------------------------------------------------------------------ scenarios

PREV10 = [0.3, 0.4, 0.25, 0.35, 0.2, 0.3, 0.5, 0.15, 0.4, 0.3]
TREAT10 = {0: 0.7, 1: 0.5, 2: -0.4, 3: 0.6, 6: 0.4}
RISK10 = {0: 0.8, 1: 0.6, 2: 0.5, 3: 0.7, 4: 0.9, 5: 1.0}


def confounded_spec(seed, log_hr=0.0, n=100_000, nc=0, nc_model=None, baseline=-9.3):
    return SimulationSpec(
        n_subjects=n, n_binary_covariates=10, covariate_prevalences=PREV10,
        treatment_intercept=-0.8, treatment_coefficients=TREAT10,
        outcome_models={"o1": OutcomeModel(baseline, RISK10, [log_hr])},
        censoring_rate=1 / 2500, admin_censor_day=1095,
        negative_control_count=nc, negative_control_model=nc_model, seed=seed)


def quarter_results(cov, cohort, settings, outcome_id="o1"):
    """Development matching, risk model, quarters, then per-quarter estimation."""
    model, _ = develop_risk_model_with_matching(cov, cohort, outcome_id, settings)
    strata = stratify_by_risk(model, cov, cohort, outcome_id, settings)
    out = [estimate_stratum(cov, cohort, outcome_id, strata.members(k), settings, k,
                            negative_controls=False)
           for k in range(1, settings.risk_strata_count + 1)]
    return model, strata, out


def fast_settings(seed=0, **kw):
    base = dict(outcome_ids=("o1",), seed=seed, bootstrap_reps=0)
    base.update(kw)
    return StudySettings(**base)


# ------------------------------------------------------------------ 1

def test_01_lasso_matches_projected_gradient_oracle(verdict):
    worst = 0.0
    for i in range(25):
        rng = np.random.default_rng(9000 + i)
        n, p = int(rng.integers(10, 51)), int(rng.integers(1, 6))
        X = rng.normal(size=(n, p)) if i % 2 else (rng.random((n, p)) < 0.4).astype(float)
        eta = X @ rng.normal(scale=0.8, size=p) - 0.2
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
        if y.min() == y.max():
            y[0] = 1.0 - y[0]
        scale = penalty_scale(X)
        lam = lambda_max(X, y) * rng.uniform(0.02, 0.9)
        m = fit_logistic_lasso(X, y, lam)
        f = lasso_objective(m.intercept, coefficient_vector(m, range(p)), X, y, lam, scale)
        _, _, f_ref = projected_gradient_lasso(X, y, lam, scale)
        worst = max(worst, abs(f - f_ref))
    verdict(1, "LASSO oracle equivalence", worst <= 1e-6,
            f"max |objective - oracle| over 25 instances = {worst:.2e} (tol 1e-6)")


# ------------------------------------------------------------------ 2

def test_02_cox_derivatives_and_hand_case(verdict):
    rng = np.random.default_rng(42)
    worst, worst_ll = 0.0, 0.0
    for _ in range(10):
        n = 60
        time = rng.integers(1, 25, size=n)  # integer days: plenty of ties
        event = rng.random(n) < 0.7
        z = rng.integers(0, 2, size=n)
        strata = rng.integers(1, 4, size=n)
        for beta in (-0.7, 0.0, 0.4):
            h = 1e-5
            ll, g, H = cox_partial_loglik(beta, time, event, z, strata)
            lp = cox_partial_loglik(beta + h, time, event, z, strata)
            lm = cox_partial_loglik(beta - h, time, event, z, strata)
            g_fd = (lp[0] - lm[0]) / (2 * h)
            H_fd = (lp[1] - lm[1]) / (2 * h)
            worst = max(worst, abs(g - g_fd) / max(abs(g_fd), 1e-8),
                        abs(H - H_fd) / max(abs(H_fd), 1e-8))
            ref = efron_partial_loglik(beta, time, event, z, strata)
            worst_ll = max(worst_ll, abs(ll - ref) / abs(ref))

    # six subjects, one tied event pair across arms
    t = [2, 3, 3, 5, 6, 8]
    e = [1, 1, 1, 0, 1, 1]
    z = [1, 0, 1, 1, 0, 0]
    b, _ = fit_cox(t, e, z)
    b_grid = grid_maximize(lambda v: efron_partial_loglik(v, t, e, z), -5.0, 5.0)
    gap = abs(b - b_grid)
    ok = worst < 1e-4 and worst_ll < 1e-12 and gap < 1e-6
    verdict(2, "Cox correctness", ok,
            f"max FD relative error {worst:.2e} (tol 1e-4); loglik vs loop oracle "
            f"{worst_ll:.1e}; 6-subject fit {b:.9f} vs grid {b_grid:.9f} (gap {gap:.1e}, tol 1e-6)")


# ------------------------------------------------------------------ 3

def test_03_km_exactness(verdict):
    # times 1+, 2, 3+, 4 (+ = censored)
    km = km_curve([1, 2, 3, 4], [0, 1, 0, 1])
    s2, s3, s4 = km.at(2), km.at(3), km.at(4)
    v2 = km.variance_at(2)
    # Greenwood by hand at t = 2: S^2 * d / (n (n - d)) = (4/9) * 1 / (3 * 2)
    v2_hand = (2 / 3) ** 2 * 1 / (3 * 2)
    ok = (s2 == 2 / 3 and s3 == 2 / 3 and s4 == 0.0 and abs(v2 - v2_hand) <= 1e-12
          and abs(km.variance_at(3) - v2_hand) <= 1e-12 and km.variance_at(4) == 0.0)
    verdict(3, "KM exactness", ok,
            f"S(2)={s2!r}, S(4)={s4!r}, Greenwood(2)={v2!r} vs hand {v2_hand!r}")


# ------------------------------------------------------------------ 4

@pytest.mark.slow
def test_04_confounding_recovery(verdict):
    reps = 100
    covered = np.zeros(4, int)
    crude_biased = None
    for r in range(reps):
        cov, cohort, _ = simulate(confounded_spec(seed=1000 + r))
        if r == 0:
            time, event = cohort.time_to_event("o1", 730)
            b, se = fit_cox(time, event, cohort.treatment)
            crude_biased = b - Z975 * se > 0.0
        _, _, results = quarter_results(cov, cohort, fast_settings(seed=r))
        for k, res in enumerate(results):
            e = res.effect
            covered[k] += int(np.isfinite(e.hr_lo) and e.hr_lo <= 1.0 <= e.hr_hi)
    ok = bool(crude_biased) and (covered >= 90).all()
    verdict(4, "confounding recovery", ok,
            f"crude HR CI excludes 1: {bool(crude_biased)}; per-quarter coverage of HR=1 "
            f"over {reps} replicates = {covered.tolist()} (need >= 90 each)")


# ------------------------------------------------------------------ 5

def test_05_absolute_effect_grows_with_risk(verdict):
    cov, cohort, truth = simulate(confounded_spec(seed=2024, log_hr=math.log(0.8)))
    settings = fast_settings(seed=1)
    _, strata, results = quarter_results(cov, cohort, settings)
    est = np.array([r.effect.ard for r in results])
    inversions = int(np.sum(np.diff(est) < 0))
    pos = {s: i for i, s in enumerate(truth.subject_ids.tolist())}
    true_ard = []
    for k in range(1, 5):
        mask = np.zeros(len(truth.subject_ids), bool)
        mask[[pos[s] for s in strata.members(k).tolist()]] = True
        true_ard.append(truth.true_ard("o1", mask))
    strictly = bool(np.all(np.diff(true_ard) > 0))
    hr = [round(r.effect.hr, 3) for r in results]
    verdict(5, "scale dependence", inversions <= 1 and strictly,
            f"estimated ARD (pp) by quarter {np.round(est, 3).tolist()} with {inversions} "
            f"inversion(s); true ARD {np.round(true_ard, 3).tolist()}; HR {hr}")


# ------------------------------------------------------------------ 6

def rich_confounded_spec(seed, n=30_000):
    """30 binary covariates, 12 of them driving treatment: a near-continuous PS."""
    rng = np.random.default_rng(0)
    prev = np.round(rng.uniform(0.1, 0.5, 30), 2).tolist()
    treat = {j: float(np.round(rng.choice([-1, 1]) * rng.uniform(0.2, 0.7), 2))
             for j in range(12)}
    return SimulationSpec(
        n_subjects=n, n_binary_covariates=30, covariate_prevalences=prev,
        treatment_intercept=-0.5, treatment_coefficients=treat,
        outcome_models={"o1": OutcomeModel(-9.0, {j: 0.5 for j in range(0, 30, 3)}, [0.0])},
        censoring_rate=1 / 2500, seed=seed)


def _matched_smd(spec, settings):
    cov, cohort, _ = simulate(spec)
    _, ps = develop_risk_model_with_matching(cov, cohort, "o1", settings)
    rows = compute_balance(cov.design(ps.subject_ids), ps.treatment, "matched-set",
                           matched=ps.matched)
    return (max(abs(r.smd_before) for r in rows), max(abs(r.smd_after) for r in rows),
            int(ps.matched.sum()) // 2)


def test_06_matching_balances_confounders(verdict):
    settings = fast_settings(seed=3)
    before, after, pairs = _matched_smd(rich_confounded_spec(seed=77), settings)
    # five binary confounders give ~32 distinct scores; greedy matching then borrows
    # comparators from neighbouring covariate patterns (reported, not gated)
    _, coarse_after, _ = _matched_smd(confounded_spec(seed=77, n=30_000), settings)
    verdict(6, "balance after matching", before > 0.1 and after < 0.1,
            f"max |SMD| before {before:.3f} (> 0.1), after matching {after:.3f} (< 0.1), "
            f"{pairs} pairs; coarse 10-covariate scenario after matching {coarse_after:.3f}")


# ------------------------------------------------------------------ 7

def test_07_negative_controls_and_empirical_null(verdict):
    # 40 true-null controls whose hazard depends on non-confounding covariates
    nc_model = OutcomeModel(-8.6, {4: 0.5, 5: 0.4, 8: 0.3}, [0.0])
    # five datasets: +/- 5 pp is only 1.5 binomial SDs for a single set of 40
    counts, covered, cal = [], 0, []
    for seed in range(314, 319):
        spec = confounded_spec(seed=seed, n=30_000, nc=40, nc_model=nc_model)
        cov, cohort, _ = simulate(spec)
        settings = fast_settings(seed=4, negative_control_ids=tuple(spec.negative_control_ids))
        ests = estimate_stratum(cov, cohort, "o1", cohort.subject_ids, settings,
                                "overall").nc_estimates
        y = np.array([e.log_hr for e in ests])
        se = np.array([e.se for e in ests])
        counts.append(len(ests))
        covered += int(np.sum(np.abs(y) <= Z975 * se))
        # calibrated p for each control under a null fitted to the other 39
        for i in range(len(ests)):
            null = fit_empirical_null(ests[:i] + ests[i + 1:])
            cal.append(calibrated_p(y[i], se[i], null))
    coverage = covered / sum(counts)
    ks_p = stats.kstest(cal, "uniform").pvalue

    # injected systematic error: log_hr_i ~ N(0.1, 0.05^2 + se_i^2)
    rng = np.random.default_rng(7)
    mu_true, sigma_true = 0.1, 0.05
    mus, mu_ses = [], []
    for _ in range(100):
        s = rng.uniform(0.05, 0.3, size=40)
        draw = rng.normal(mu_true, np.sqrt(sigma_true ** 2 + s ** 2))
        null = fit_empirical_null([NegativeControlEstimate(f"nc{j}", float(a), float(b))
                                   for j, (a, b) in enumerate(zip(draw, s))])
        mus.append(null.mu)
        mu_ses.append(null.mu_se)
    mus, mu_ses = np.array(mus), np.array(mu_ses)
    mean_z = abs(mus.mean() - mu_true) / (mus.std(ddof=1) / math.sqrt(len(mus)))
    within = float(np.mean(np.abs(mus - mu_true) <= 3 * mu_ses))

    ok = (counts == [40] * 5 and 0.90 <= coverage <= 1.0 and ks_p > 0.01
          and mean_z <= 3 and within >= 0.95)
    verdict(7, "calibration", ok,
            f"5 x 40 controls, 95% CI coverage {coverage:.3f} (0.90-1.00); KS p "
            f"{ks_p:.3f} (> 0.01); mean mu_hat {mus.mean():.4f} is {mean_z:.3f} SE from 0.1; "
            f"{within:.0%} of draws within 3 SE")


# ------------------------------------------------------------------ 8

def test_08_risk_model_sanity(verdict, tmp_path):
    settings = fast_settings(seed=5)
    null_spec = confounded_spec(seed=55, n=30_000, baseline=-7.9)
    null_spec.outcome_models["o1"] = OutcomeModel(-7.9, {}, [0.0])
    cov, cohort, _ = simulate(null_spec)
    model, _ = develop_risk_model_with_matching(cov, cohort, "o1", settings)
    perf = evaluate_risk_model(model, cov, cohort, "o1", settings)
    c_null = {p.population_label: p.c_statistic for p in perf}

    cov, cohort, truth = simulate(confounded_spec(seed=56, n=30_000))
    model, _ = develop_risk_model_with_matching(cov, cohort, "o1", settings)
    keep = cohort.analyzable("o1")
    pred = predict_proba(model, cov, cohort.subject_ids[keep])
    rho = stats.spearmanr(pred, truth.true_risk["o1"][keep]).statistic

    # four-population table through the full study runner
    write_bundle(cov, cohort, tmp_path)
    cfg = {"bundle": {"covariates": "covariates.csv", "cohort": "cohort.csv",
                      "outcomes": "outcomes.csv"},
           "report": {"emit_km_curves": False, "bootstrap_reps": 0},
           "settings": {"outcome_ids": ["o1"], "seed": 5}}
    (tmp_path / "study.json").write_text(json.dumps(cfg))
    config, errors = validate_config(tmp_path / "study.json")
    assert errors == []
    bundle = run_study(config, output_dir=tmp_path / "out")
    table = bundle.tables["performance.csv"]
    labels = table["population_label"].tolist()

    ok = (abs(c_null["entire"] - 0.5) <= 0.03 and rho > 0.8
          and labels == ["matched", "treatment", "comparator", "entire"]
          and table["c_statistic"].notna().all()
          and (tmp_path / "out" / "performance.csv").exists())
    verdict(8, "risk-model sanity", ok,
            f"no-signal c-statistic {c_null['entire']:.4f} (0.5 +/- 0.03); strong-signal "
            f"Spearman {rho:.3f} (> 0.8); performance rows {labels}")


# ------------------------------------------------------------------ 9

def test_09_byte_identical_reports(verdict, tmp_path):
    src = REPO / "data" / "example"
    for name in ("covariates.csv", "cohort.csv", "outcomes.csv", "study.json"):
        shutil.copy(src / name, tmp_path / name)
    config, errors = validate_config(tmp_path / "study.json",
                                     {"report.bootstrap_reps": 50})
    assert errors == []
    runs = {"serial-a": 1, "serial-b": 1, "parallel": 3}
    blobs = {}
    for label, workers in runs.items():
        run_study(config, workers=workers, output_dir=tmp_path / label)
        blobs[label] = {p.name: p.read_bytes() for p in sorted((tmp_path / label).iterdir())
                        if p.is_file()}
    same_report = len({b["report.json"] for b in blobs.values()}) == 1
    same_all = all(blobs[k] == blobs["serial-a"] for k in blobs)
    verdict(9, "determinism", same_report and same_all,
            f"report.json identical across 2 serial runs and a 3-worker run: {same_report}; "
            f"all {len(blobs['serial-a'])} output files identical: {same_all}")


# ------------------------------------------------------------------ 10

def test_10_separation_fails_diagnostics_but_reports(verdict, tmp_path):
    # covariate 6 nearly determines treatment (no overlap); covariate 7 is an
    # unmeasured confounder that also drives every negative control
    spec = SimulationSpec(
        n_subjects=20_000, n_binary_covariates=8,
        covariate_prevalences=[0.3, 0.4, 0.25, 0.35, 0.2, 0.3, 0.5, 0.4],
        treatment_intercept=-2.0, treatment_coefficients={6: 4.0, 7: 1.0, 0: 0.5},
        outcome_models={"o1": OutcomeModel(-8.6, {0: 0.8, 1: 0.6, 2: 0.5, 3: 0.9}, [0.0])},
        censoring_rate=1 / 3000, negative_control_count=10,
        negative_control_model=OutcomeModel(-8.5, {7: 1.2, 3: 0.3}, [0.0]),
        hidden_covariates=[7], seed=5)
    cov, cohort, _ = simulate(spec)
    write_bundle(cov, cohort, tmp_path)
    cfg = {"bundle": {"covariates": "covariates.csv", "cohort": "cohort.csv",
                      "outcomes": "outcomes.csv"},
           "report": {"emit_km_curves": False, "bootstrap_reps": 50},
           "settings": {"outcome_ids": ["o1"], "seed": 6,
                        "negative_control_ids": spec.negative_control_ids}}
    (tmp_path / "study.json").write_text(json.dumps(cfg))
    config, errors = validate_config(tmp_path / "study.json")
    assert errors == []
    bundle = run_study(config, output_dir=tmp_path / "out")
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    q1 = report["outcomes"][0]["strata"][0]
    reasons = q1["verdict"]["reasons"]
    eff = q1["effect"]
    has_eq = any(r.startswith("equipoise") for r in reasons)
    has_nc = any(r.startswith("negative controls") for r in reasons)
    reported = all(eff[k] is not None for k in ("hr", "hr_lo", "hr_hi", "ard", "ard_lo",
                                                 "ard_hi"))
    row = bundle.tables["estimates.csv"].iloc[0]
    ok = (eff["diagnostics_pass"] is False and has_eq and has_nc and reported
          and np.isfinite(row["hr"]) and not bundle.all_diagnostics_pass
          and bundle.exit_code == 2)
    verdict(10, "diagnostics gating", ok,
            f"Q1 diagnostics_pass={eff['diagnostics_pass']}, equipoise {q1['verdict']['equipoise']:.3f}, "
            f"NC significant {q1['verdict']['nc_significant_fraction']:.2f}, HR {eff['hr']:.3f}, "
            f"ARD {eff['ard']:.3f} pp; reasons: {'; '.join(reasons)}")
