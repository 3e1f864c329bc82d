import math

import numpy as np
import pytest
from scipy import stats

from frailtyreg import FitOptions, TruthSpec, fit, generate
from frailtyreg.simulate import (STUDIES, Baseline, CovariateLaw, attenuation_study, calibrate_censoring,
                                 censoring_fraction, run_scenario, sample_frailty, score_size_power_study,
                                 sign_consistency_study, survival_times, true_survival)
from frailtyreg.transforms import FrailtyFamily, frailty_variance, laplace

from .conftest import FAMILIES, family_id


def test_inversion_example():
    truth = TruthSpec(beta0=(0.0, 0.0))
    T = survival_times(truth, np.zeros((1, 2)), np.ones(1), np.array([0.5]))
    assert T[0] == pytest.approx(math.log(2), abs=1e-15)


def test_weibull_inversion():
    b = Baseline("weibull", shape=2.0, scale=3.0)
    t = np.array([0.5, 1.0, 4.0])
    np.testing.assert_allclose(b.inverse(b(t)), t, rtol=1e-14)


def test_exponential_special_case():
    truth = TruthSpec(gamma0=0.0, beta0=(0.0, 0.0), censor_max=1e9, atom_weight=0.0)
    d = generate(truth, 2000, seed=1)
    assert stats.kstest(d.time, "expon").pvalue > 0.01


def test_generate_is_deterministic():
    a = generate(TruthSpec(), 300, seed=5)
    b = generate(TruthSpec(), 300, seed=5)
    assert a == b
    assert generate(TruthSpec(), 300, seed=6) != a


@pytest.mark.parametrize("family", FAMILIES, ids=family_id)
@pytest.mark.parametrize("gamma", [0.5, 2.0])
def test_frailty_sampler_matches_laplace(family, gamma):
    rng = np.random.default_rng(7)
    n = 200_000
    W = sample_frailty(family, gamma, n, rng)
    assert np.all(W > 0)
    assert abs(W.mean() - 1) < 5 * math.sqrt(frailty_variance(family, gamma) / n) + 1e-3
    for t in (0.5, 1.0, 3.0):
        e = np.exp(-t * W)
        se = e.std() / math.sqrt(n)
        assert abs(e.mean() - laplace(family, gamma, t)) < 5 * se


def test_zero_gamma_gives_unit_frailty():
    assert np.all(sample_frailty(FrailtyFamily.lognormal(), 0.0, 10, np.random.default_rng(0)) == 1.0)


@pytest.mark.parametrize("truth", [
    TruthSpec(),
    TruthSpec(gamma0=2.0, censor_max=3.0, atom_weight=0.2),
    TruthSpec(family=FrailtyFamily.inverse_gaussian(), censor_max=8.0, tau=6.0),
], ids=["default", "heavy", "ig-tau"])
def test_censoring_fraction_within_3_se(truth):
    p = censoring_fraction(truth)
    n = 20_000
    d = generate(truth, n, seed=2)
    emp = 1 - d.status.mean()
    assert abs(emp - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_censoring_atom_at_tau():
    truth = TruthSpec(censor_max=2.0, atom_weight=0.3)
    d = generate(truth, 4000, seed=3)
    assert d.tau == 2.0
    assert np.all(d.time <= 2.0)
    assert np.mean((d.time == 2.0) & (d.status == 0)) > 0.05


def test_calibrate_censoring():
    t = calibrate_censoring(TruthSpec(), 0.25, n_mc=20_000)
    assert t.tau == t.censor_max
    assert censoring_fraction(t, n_mc=20_000) == pytest.approx(0.25, abs=1e-4)


def test_true_survival():
    truth = TruthSpec(gamma0=1.0)
    assert true_survival(truth, [0.0, 0.0], 1.0) == pytest.approx(0.5)
    assert true_survival(truth, [0.0, 0.0], 0.0) == 1.0


def test_bernoulli_mix():
    law = CovariateLaw("bernoulli_mix", mean=(0.0, 0.0), p=0.3)
    Z = law.draw(5000, np.random.default_rng(0))
    assert set(np.unique(Z[:, 0])) == {0.0, 1.0}
    assert Z[:, 0].mean() == pytest.approx(0.3, abs=0.03)


@pytest.mark.parametrize("kw", [
    {"gamma0": -1.0},
    {"beta0": (1.0,)},
    {"censor_max": 0.0},
    {"atom_weight": 1.0},
])
def test_truth_validation(kw):
    with pytest.raises(ValueError):
        TruthSpec(**kw)


def test_covariance_must_be_positive_definite():
    with pytest.raises(ValueError):
        CovariateLaw(cov=((1.0, 2.0), (2.0, 1.0)))


def test_truth_dict_round_trip():
    t = TruthSpec(family=FrailtyFamily.igg(0.2), baseline=Baseline("weibull", shape=1.5),
                  covariates=CovariateLaw("bernoulli_mix", mean=(0.0, 1.0)), censor_max=4.0)
    assert TruthSpec.from_dict(t.to_dict()) == t


def test_null_frailty_gives_small_gamma():
    d = generate(TruthSpec(gamma0=0.0, censor_max=5.0), 800, seed=21)
    assert fit(d, None, FitOptions(mh_steps=200)).gamma < 0.2


# -- studies at toy scale -------------------------------------------------------------


def test_attenuation_study_reproducible(tmp_path):
    truth = TruthSpec(gamma0=2.0)
    a = attenuation_study(truth, 150, 3, seed=1, options=FitOptions(mh_steps=20))
    b = attenuation_study(truth, 150, 3, seed=1, options=FitOptions(mh_steps=20))
    assert a.estimates == b.estimates and a.summary == b.summary
    assert set(a.summary) == {"cox"}
    assert len(a.estimates["cox"]) == 3
    a.summary_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().startswith("statistic,value")


def test_sign_consistency_study_shapes():
    truth = TruthSpec(beta0=(0.8, 1.0), covariates=CovariateLaw("bernoulli_mix", mean=(0.0, 0.0)))
    res = sign_consistency_study(truth, 150, 3, seed=2, B=30)
    assert 0 <= res.summary["sign_agreement"] <= 1
    assert 0 <= res.summary["wald_rejection_rate"] <= 1


def test_score_study_shapes():
    res = score_size_power_study(TruthSpec(gamma0=0.0), 100, 3, B=20, seed=3)
    assert 0 <= res.summary["rejection_rate"] <= 1
    assert res.reps == 3


def test_run_scenario(tmp_path):
    spec = {"study": "attenuation", "truth": {"gamma0": 1.0, "beta0": [1.0, -0.5]}, "n": 100, "reps": 2,
            "seed": 4, "options": {"mh_steps": 10}, "working": "inverse_gaussian"}
    res = run_scenario(spec)
    assert res.seed == 4 and set(res.summary) == {"cox", "inverse_gaussian"}
    res.to_json(tmp_path / "r.json")
    with pytest.raises(ValueError):
        run_scenario({"study": "nope"})
    assert "bootstrap_calibration" in STUDIES
