import numpy as np
import pytest

from riskstrat.simulator import OutcomeModel, SimulationSpec, simulate


def small_spec(n=3000, seed=11, nc=6, **kw) -> SimulationSpec:
    base = dict(
        n_subjects=n, n_binary_covariates=6,
        covariate_prevalences=[0.3, 0.4, 0.25, 0.35, 0.2, 0.3],
        treatment_intercept=-0.3, treatment_coefficients={0: 0.5, 1: 0.4, 2: -0.3},
        outcome_models={"o1": OutcomeModel(-8.6, {0: 0.8, 1: 0.6, 2: 0.5, 3: 0.9, 4: 1.0},
                                           [np.log(0.8)], prior_prevalence=0.02)},
        censoring_rate=1 / 3000, admin_censor_day=1095,
        negative_control_count=nc,
        negative_control_model=OutcomeModel(-8.3, {0: 0.3, 3: 0.4}, [0.0]) if nc else None,
        seed=seed)
    base.update(kw)
    return SimulationSpec(**base)


@pytest.fixture(scope="session")
def small_sim():
    return simulate(small_spec())
