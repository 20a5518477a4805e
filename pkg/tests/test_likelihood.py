import math

import numpy as np
import pytest
from scipy import integrate

from oracles import normal_logpdf
from quantpk.data import Subject
from quantpk.errors import EstimationError, ModelDegeneracyError
from quantpk.likelihood import (GaussianPrior, ObservationSet, ResidualModel, individual_loglik,
                                log_mean_exp, mc_log_marginal, pd_loglik_point, pk_loglik_point,
                                population_loglik_estimate, project_psd, psd_factor)
from quantpk.model import UNIT_SCALE, adjust_parameters
from quantpk.ode import simulate_doses

AT_MODE = -0.5 * math.log(2 * math.pi * 0.04)


def test_pk_point_examples():
    assert pk_loglik_point(1.0, 1.0, 0.2) == pytest.approx(0.6905, abs=1e-4)
    assert pk_loglik_point(1.0, 1.0, 0.2) == pytest.approx(AT_MODE, rel=1e-14)
    assert pk_loglik_point(math.e, math.e, 0.2) == pytest.approx(AT_MODE - 1.0, rel=1e-14)
    drop = pk_loglik_point(1.0, 1.0, 0.2) - pk_loglik_point(1.0, 1.0, 0.4)
    assert drop == pytest.approx(math.log(2), rel=1e-14)


def test_pd_point_examples():
    assert pd_loglik_point(10.0, 10.0, 0.15) == pytest.approx(-1.3244, abs=1e-4)
    grid = np.linspace(5, 15, 101)
    assert np.argmax([pd_loglik_point(o, 10.0, 0.15) for o in grid]) == 50
    with pytest.raises(ModelDegeneracyError):
        pd_loglik_point(1.0, 0.0, 0.15)
    with pytest.raises(ModelDegeneracyError):
        pk_loglik_point(1.0, 1e-13, 0.2)


def test_points_integrate_to_one():
    pk, _ = integrate.quad(lambda o: math.exp(pk_loglik_point(o, 3.0, 0.2)), 0, np.inf, limit=200)
    pd, _ = integrate.quad(lambda o: math.exp(pd_loglik_point(o, 3.0, 0.15)), -np.inf, np.inf)
    assert abs(pk - 1) < 1e-6 and abs(pd - 1) < 1e-6


def _subject(pk=(), pd=(), dose=1.0, bw=70.0, comed=0, sid=1):
    return Subject(sid, bw, comed, ((0.0, dose),), tuple(pk), tuple(pd))


def test_individual_examples(theta, solver):
    res = ResidualModel()
    assert individual_loglik(_subject(), theta, np.zeros(6), res, solver) == 0.0
    # choose the dose so the prediction at t=6 is exactly 1 ng/mL (the model is linear in dose)
    p = adjust_parameters(theta, None, 70.0, 0)
    c1 = simulate_doses(p, [(0.0, 1.0)], 6.0, solver).evaluate(6.0)[0, 0] * UNIT_SCALE / p.v1
    s = _subject(pk=[(6.0, 1.0)], dose=1.0 / c1)
    assert individual_loglik(s, theta, np.zeros(6), res, solver) == pytest.approx(0.6905, abs=1e-4)
    one = _subject(pk=[(6.0, 2.0)], pd=[(12.0, 40.0)])
    two = _subject(pk=[(6.0, 2.0), (6.0, 2.0)], pd=[(12.0, 40.0), (12.0, 40.0)])
    a = individual_loglik(one, theta, np.zeros(6), res, solver)
    assert individual_loglik(two, theta, np.zeros(6), res, solver) == pytest.approx(2 * a, rel=1e-12)


def test_nonpositive_pk_dropped(caplog):
    s = _subject(pk=[(1.0, -0.1), (2.0, 0.0), (3.0, 1.0)])
    obs = ObservationSet.from_subject(s, ResidualModel())
    assert obs.pk_t.tolist() == [3.0]
    assert "dropping 2" in caplog.text
    assert ObservationSet.from_subject(s, ResidualModel(pk_model="proportional")).pk_t.size == 3


def test_degenerate_prediction_names_subject(theta, solver):
    s = _subject(pd=[(1.0, 1.0)], sid=42)
    with pytest.raises(ModelDegeneracyError, match="subject 42") as err:
        individual_loglik(s, theta.with_values(kin=1e-300), np.zeros(6), ResidualModel(), solver)
    assert err.value.subject_id == 42


def test_omega_zero_is_exact(theta, solver):
    subjects = [_subject(pk=[(2.0, 3.0)], pd=[(24.0, 45.0)], sid=i, bw=60 + 5 * i) for i in range(1, 4)]
    res = ResidualModel()
    exact = sum(individual_loglik(s, theta, np.zeros(6), res, solver) for s in subjects)
    for n_mc in (1, 7):
        est = population_loglik_estimate(subjects, theta, np.zeros((6, 6)), res, n_mc, 3, solver)
        assert est.estimate == pytest.approx(exact, rel=1e-12)
        assert est.per_subject_mean == pytest.approx(exact / 3, rel=1e-12)


def test_population_reproducible_and_worker_invariant(theta, solver):
    subjects = [_subject(pk=[(2.0, 3.0)], pd=[(24.0, 45.0)], sid=i) for i in range(1, 5)]
    om = np.eye(6) * 0.09
    a = population_loglik_estimate(subjects, theta, om, ResidualModel(), 1, 11, solver)
    b = population_loglik_estimate(subjects, theta, om, ResidualModel(), 1, 11, solver, workers=3)
    assert a == b


def test_population_all_draws_fail(theta, solver):
    s = _subject(pd=[(1.0, 1.0)], sid=9)
    with pytest.raises(EstimationError, match="subject 9"):
        population_loglik_estimate([s], theta.with_values(kin=1e-300), np.zeros((6, 6)),
                                   ResidualModel(), 3, 0, solver)


# conjugate toy: y | eta ~ N(eta, s^2), eta ~ N(0, w)  =>  y ~ N(0, w + s^2)
Y, S, W = 1.3, 0.5, 0.8


def _toy(n_mc, seed):
    ll = lambda e: float(normal_logpdf(Y, e[0], S))
    return mc_log_marginal(ll, psd_factor(np.array([[W]])), n_mc, np.random.default_rng(seed))


def test_conjugate_gaussian_oracle():
    est, se = _toy(10_000, 1)
    exact = float(normal_logpdf(Y, 0.0, math.sqrt(W + S ** 2)))
    assert abs(est - exact) < 3 * se


def test_se_scales_with_root_n():
    se_small = np.mean([_toy(400, s)[1] for s in range(10)])
    se_large = np.mean([_toy(1600, s)[1] for s in range(10)])
    assert 1.0 <= se_small / se_large <= 4.0


def test_log_mean_exp_shift_and_overflow():
    v = np.array([-1000.0, -1001.5, -999.0])
    assert log_mean_exp(v + 7.25) == pytest.approx(log_mean_exp(v) + 7.25, abs=1e-12)
    assert math.isfinite(log_mean_exp(v + 2000))
    assert log_mean_exp([-math.inf, -math.inf]) == -math.inf


def test_psd_helpers():
    a = np.array([[1.0, 2.0], [2.0, 1.0]])      # eigenvalues 3, -1
    p = project_psd(a)
    assert np.min(np.linalg.eigvalsh(p)) >= -1e-12
    om = np.diag([0.09, 0.0])
    f = psd_factor(om)
    assert np.allclose(f @ f.T, om)
    prior = GaussianPrior(np.eye(2) * 0.25)
    assert prior.logpdf([0.0, 0.0]) == pytest.approx(2 * normal_logpdf(0.0, 0.0, 0.5))
