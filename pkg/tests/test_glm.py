import numpy as np
import pytest
from scipy import special

from obsstudy.glm import (ConvergenceError, SeparationError, SingularDesignError, design, fit_logit,
                          fit_probit, fit_wls, mills_ratio, norm_cdf, predict_prob)


def test_wls_intercept_only_is_mean():
    f = fit_wls(np.ones((3, 1)), [1.0, 2.0, 3.0])
    assert f.coefficients[0] == pytest.approx(2.0)


def test_wls_exact_fit():
    X = design(np.arange(6.0))
    f = fit_wls(X, 1.5 - 2 * np.arange(6.0))
    np.testing.assert_allclose(f.coefficients, [1.5, -2.0], atol=1e-12)
    assert f.scale == pytest.approx(0.0, abs=1e-12)


def test_wls_matches_normal_equations():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
    y = rng.normal(size=50)
    w = rng.uniform(0.2, 2.0, 50)
    f = fit_wls(X, y, w)
    ref = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * y))
    np.testing.assert_allclose(f.coefficients, ref, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(f.covariance, f.covariance.T, atol=1e-10)


def test_wls_constant_weights_equal_unit_weights():
    rng = np.random.default_rng(4)
    X = design(rng.normal(size=(40, 2)))
    y = rng.normal(size=40)
    a, b = fit_wls(X, y), fit_wls(X, y, np.full(40, 3.7))
    np.testing.assert_allclose(a.coefficients, b.coefficients, rtol=1e-12)


def test_wls_rank_deficiency_names_column():
    rng = np.random.default_rng(5)
    x = rng.normal(size=20)
    X = design(np.column_stack([x, 2 * x]), ["a", "a2"])
    with pytest.raises(SingularDesignError, match="a2") as ei:
        fit_wls(X, rng.normal(size=20))
    assert ei.value.column == "a2"


def test_logit_balanced_intercept_only():
    f = fit_logit(np.ones((10, 1)), np.r_[np.ones(5), np.zeros(5)])
    assert f.coefficients[0] == pytest.approx(0.0, abs=1e-12)


def test_logit_two_by_two_log_odds():
    a, b, c, d = 30, 10, 15, 25  # (x=1,t=1), (x=1,t=0), (x=0,t=1), (x=0,t=0)
    x = np.r_[np.ones(a + b), np.zeros(c + d)]
    t = np.r_[np.ones(a), np.zeros(b), np.ones(c), np.zeros(d)]
    f = fit_logit(design(x), t)
    assert f.coefficients[1] == pytest.approx(np.log(a * d / (b * c)), abs=1e-9)


def test_logit_score_identity_and_gradient():
    rng = np.random.default_rng(6)
    x = rng.normal(size=500)
    t = (rng.random(500) < special.expit(0.5 + 1.2 * x)).astype(float)
    X = design(x)
    f = fit_logit(X, t)
    p = predict_prob(f, X)
    assert p.mean() == pytest.approx(t.mean(), abs=1e-8)
    assert f.gradient_norm < 1e-8

    def ll(beta):
        eta = X.values @ beta
        return float(t @ eta - np.logaddexp(0, eta).sum())

    h = 1e-6
    num = [(ll(f.coefficients + h * e) - ll(f.coefficients - h * e)) / (2 * h) for e in np.eye(2)]
    assert np.max(np.abs(num)) < 1e-5


def test_logit_monte_carlo_recovery():
    hits = 0
    for r in range(100):
        rng = np.random.default_rng(1000 + r)
        x = rng.normal(size=2000)
        t = (rng.random(2000) < special.expit(0.5 + 1.2 * x)).astype(float)
        f = fit_logit(design(x), t)
        hits += bool(np.all(np.abs(f.coefficients - [0.5, 1.2]) <= 3 * f.se))
    assert hits >= 99


def test_probit_recovery_and_logit_ratio():
    rng = np.random.default_rng(7)
    x = rng.normal(size=20000)
    t = (x + rng.normal(size=x.size) > 0).astype(float)
    pf = fit_probit(design(x), t)
    lf = fit_logit(design(x), t)
    assert pf.coefficients[1] == pytest.approx(1.0, abs=0.05)
    assert 1.6 <= lf.coefficients[1] / pf.coefficients[1] <= 1.8


def test_separation_detected():
    x = np.r_[-np.arange(1, 6.0), np.arange(1, 6.0)]
    t = (x > 0).astype(float)
    with pytest.raises(SeparationError):
        fit_logit(design(x), t)


def test_single_class_rejected():
    with pytest.raises(SeparationError):
        fit_probit(np.ones((4, 1)), np.ones(4))


def test_predict_prob_values():
    f = fit_logit(np.ones((4, 1)), [1, 0, 1, 0])
    np.testing.assert_allclose(predict_prob(f, np.ones((3, 1))), 0.5)
    from obsstudy.glm import FitResult

    fr = FitResult(np.array([1.96]), np.eye(1), ("c",))
    # Phi(1.96) = 0.97500210485..., i.e. 2.1e-6 above the rounded 0.975
    assert predict_prob(fr, np.ones((1, 1)), "probit")[0] == pytest.approx(0.9750021048517795, abs=1e-15)
    with pytest.raises(ValueError, match="columns"):
        predict_prob(fr, np.ones((1, 2)))
    big = FitResult(np.array([100.0]), np.eye(1), ("c",))
    assert predict_prob(big, np.ones((1, 1)))[0] == 1 - 1e-12


def test_normal_cdf_and_mills_accuracy():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 40
    for s in (-40.0, -5.0, 0.0, 1.96, 3.0):
        cdf = mpmath.ncdf(s)
        pdf = mpmath.npdf(s)
        assert abs(float(norm_cdf(s)) - float(cdf)) < 1e-12
        assert float(mills_ratio(s)) == pytest.approx(float(pdf / cdf), rel=1e-12)


def test_convergence_error_is_exported():
    assert issubclass(ConvergenceError, RuntimeError)
