import math

import numpy as np
import pytest

from riskstrat.cohort import NO_EVENT, write_bundle
from riskstrat.simulator import (OutcomeModel, SimulationSpec, _uniforms, simulate, true_risk)
from riskstrat.survival import fit_cox

from conftest import small_spec


def _spec(**kw):
    base = dict(n_subjects=20000, n_binary_covariates=3, covariate_prevalences=[0.3, 0.5, 0.2],
                outcome_models={"o": OutcomeModel(-7.5)}, seed=5)
    base.update(kw)
    return SimulationSpec(**base)


def test_null_treatment_model_gives_half_treated():
    n = 20000
    _, cohort, truth = simulate(_spec(n_subjects=n))
    frac = cohort.treatment.mean()
    assert abs(frac - 0.5) <= 3 * math.sqrt(0.25 / n)
    assert np.allclose(truth.true_propensity, 0.5)


def test_event_fraction_matches_exponential_cdf():
    h0 = -7.0
    _, cohort, _ = simulate(_spec(outcome_models={"o": OutcomeModel(h0)}, admin_censor_day=1000))
    _, event = cohort.time_to_event("o", 730)
    expected = 1 - math.exp(-730 * math.exp(h0))
    se = math.sqrt(expected * (1 - expected) / len(event))
    assert abs(event.mean() - expected) < 4 * se


def test_same_seed_same_bytes(tmp_path):
    spec = small_spec(n=500)
    for d in ("a", "b"):
        cov, cohort, truth = simulate(spec)
        write_bundle(cov, cohort, tmp_path / d)
        truth.write_csv(tmp_path / d / "truth.csv")
    for name in ("covariates.csv", "cohort.csv", "outcomes.csv", "truth.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    cov2, _, _ = simulate(small_spec(n=500, seed=12))
    assert not np.array_equal(cov2.entry_subject, cov.entry_subject)


def test_subject_streams_are_order_independent():
    full = _uniforms(9, "event/o", 1000)
    tail = _uniforms(9, "event/o", 400, start=600)
    assert np.array_equal(full[600:], tail)
    assert ((full > 0) & (full < 1)).all()


def test_true_risk_limits_and_plug_in():
    m = OutcomeModel(-8.0, {})
    assert true_risk(m, [1, 0]) == true_risk(m, [0, 1])
    assert true_risk(OutcomeModel(-200.0), [1]) == pytest.approx(0.0, abs=1e-80)
    m2 = OutcomeModel(-8.0, {0: math.log(2)})
    r0, r1 = true_risk(m2, [0]), true_risk(m2, [1])
    assert -math.log1p(-r1) == pytest.approx(2 * -math.log1p(-r0), rel=1e-12)
    assert r0 == pytest.approx(1 - math.exp(-730 * math.exp(-8.0)), rel=1e-12)


def test_truth_record_matches_true_risk(small_sim):
    cov, cohort, truth = small_sim
    spec = small_spec()
    x = cov.design(cohort.subject_ids[:50], np.arange(1, 7)).x
    for i in range(50):
        assert truth.true_risk["o1"][i] == pytest.approx(true_risk(spec, x[i], outcome_id="o1"))


def test_negative_controls_have_unit_true_hr(small_sim):
    _, cohort, truth = small_sim
    spec = small_spec()
    for oid in spec.negative_control_ids:
        assert oid in cohort.events
        assert (truth.true_log_hr[oid] == 0).all()


def test_prevalences_within_four_se():
    spec = small_spec(n=20000, nc=0)
    cov, cohort, _ = simulate(spec)
    x = cov.design(None, np.arange(1, 7)).x
    for j, p in enumerate(spec.covariate_prevalences):
        se = math.sqrt(p * (1 - p) / len(cohort))
        assert abs(x[:, j].mean() - p) < 4 * se


def test_piecewise_true_log_hr_by_risk_quartile():
    hr = [0.1, 0.2, 0.3, 0.4]
    spec = _spec(outcome_models={"o": OutcomeModel(-8, {0: 1.0, 1: 0.5, 2: 0.7}, hr)})
    _, _, truth = simulate(spec)
    r = truth.true_risk["o"]
    lo, hi = np.quantile(r, [0.25, 0.75])
    assert set(truth.true_log_hr["o"][r <= r.min()]) == {0.1}
    assert set(truth.true_log_hr["o"][r > hi]) == {0.4}
    assert set(np.unique(truth.true_log_hr["o"])) <= set(hr)


def test_crude_hr_biased_only_with_confounding():
    model = OutcomeModel(-8.0, {0: 1.0, 1: 0.8}, [0.0])
    common = dict(n_subjects=40000, n_binary_covariates=3, covariate_prevalences=[0.4, 0.4, 0.4],
                  outcome_models={"o": model}, admin_censor_day=730, seed=3)
    on = SimulationSpec(treatment_coefficients={0: 1.0, 1: 1.0}, treatment_intercept=-1, **common)
    off = SimulationSpec(treatment_coefficients={2: 1.0}, treatment_intercept=-0.5, **common)
    for spec, biased in ((on, True), (off, False)):
        _, cohort, _ = simulate(spec)
        t, e = cohort.time_to_event("o", 730)
        b, se = fit_cox(t, e, cohort.treatment)
        if biased:
            assert b > 4 * se  # treated carry more risk factors
        else:
            assert abs(b) < 3 * se


def test_hidden_covariates_not_in_bundle():
    spec = _spec(hidden_covariates=[1])
    cov, _, _ = simulate(spec)
    assert 2 not in cov.covariate_ids and set(cov.covariate_ids) == {1, 3}


def test_events_respect_followup(small_sim):
    _, cohort, _ = small_sim
    for oid in cohort.outcome_ids:
        ev = cohort.events[oid]
        has = ev != NO_EVENT
        assert (ev[has] >= 1).all() and (ev[has] <= cohort.followup_days[has]).all()


@pytest.mark.parametrize("kw,needle", [
    (dict(covariate_prevalences=[0.3, 1.0, 0.2]), "prevalences"),
    (dict(outcome_models={"o": OutcomeModel(-math.inf)}), "degenerate"),
    (dict(negative_control_count=2,
          negative_control_model=OutcomeModel(-8, {}, [0.1])), "true_log_hr"),
    (dict(outcome_models={}), "at least one"),
    (dict(treatment_coefficients={7: 1.0}), "out of range"),
])
def test_invalid_specs(kw, needle):
    with pytest.raises(ValueError, match=needle):
        simulate(_spec(**kw))


def test_spec_from_json(tmp_path):
    p = tmp_path / "s.json"
    p.write_text('{"n_subjects": 10, "n_binary_covariates": 1, "covariate_prevalences": [0.5],'
                 ' "treatment_coefficients": {"0": 0.5},'
                 ' "outcome_models": {"o": {"baseline_log_hazard": -7,'
                 ' "covariate_log_hazard": {"0": 1}, "true_log_hr": -0.2}}}')
    spec = SimulationSpec.from_json(p)
    assert spec.treatment_coefficients == {0: 0.5}
    assert spec.outcome_models["o"].true_log_hr == [-0.2]
    assert spec.outcome_models["o"].covariate_log_hazard == {0: 1.0}
