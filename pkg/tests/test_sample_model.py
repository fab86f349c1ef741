import json
import math
import warnings

import numpy as np
import pytest
from scipy import integrate, special, stats

from obsstudy.dataset import ValidationError, from_arrays
from obsstudy.sample_model import (AssignmentParams, GroupLikelihood, PopulationParams,
                                   SampleModelError, SampleModelFit, assignment_prob,
                                   ate_sample_model, conditional_loglik, fit_mle, full_loglik,
                                   mean_combined, mean_pop, mean_sample, numeric_hessian,
                                   sample_cdf, sample_pdf, unconditional_prob)
from obsstudy.sim import generate_study, ignorable_spec, ireland_spec, published_params

PRIVATE_POP, PRIVATE_ASSIGN = published_params()[1]
PUBLIC_POP, PUBLIC_ASSIGN = published_params()[0]


def _tilted(mu, sigma, a0, d):
    return lambda s: special.expit(a0 + d * s) * stats.norm.pdf(s, mu, sigma)


def random_fixtures(k=20, seed=0):
    # |delta * sigma| <= 1.5; 40 Gauss-Hermite nodes lose accuracy past that
    rng = np.random.default_rng(seed)
    for _ in range(k):
        yield (rng.uniform(-2, 8), rng.uniform(0.3, 1.5), rng.uniform(-4, 4), rng.uniform(-1, 1))


def one_unit(mu, sigma, a0, d):
    return PopulationParams(mu, [0.0], sigma), AssignmentParams(a0, d, [0.0])


# assignment & unconditional probability -----------------------------------------

def test_assignment_prob_values():
    a = AssignmentParams(0.0, 0.0, [0.0])
    np.testing.assert_array_equal(assignment_prob([-3.0, 0.0, 5.0], np.zeros((3, 1)), a), 0.5)
    assert assignment_prob(1.0, [0.0], AssignmentParams(1.0, 0.0, [0.0])) == pytest.approx(
        0.7310585786, abs=1e-9)
    v = np.zeros(5)
    hi = assignment_prob([5.0, 8.0, 20.0], np.tile(v, (3, 1)), PUBLIC_ASSIGN)
    assert np.all(np.diff(hi) < 0) and hi[-1] < 1e-6
    assert assignment_prob(1e4, v, PRIVATE_ASSIGN) == 1 - 1e-15


def test_unconditional_prob_ignorable_is_logistic():
    p, a = one_unit(0.7, 1.3, -0.4, 0.0)
    assert unconditional_prob([[0.0]], [[0.0]], p, a)[0] == pytest.approx(special.expit(-0.4), abs=1e-15)


def test_unconditional_prob_symmetry():
    p, a = one_unit(0.0, 1.0, 0.0, 1.0)
    assert unconditional_prob([[0.0]], [[0.0]], p, a)[0] == pytest.approx(0.5, abs=1e-15)


def test_unconditional_prob_adaptive_oracle():
    for mu, sigma, a0, d in [(0.7, 1.3, -0.4, 0.9), *random_fixtures()]:
        p, a = one_unit(mu, sigma, a0, d)
        ref, _ = integrate.quad(_tilted(mu, sigma, a0, d), mu - 10 * sigma, mu + 10 * sigma,
                                epsabs=0, epsrel=1e-13, limit=200)
        got = unconditional_prob([[0.0]], [[0.0]], p, a, nodes=40)[0]
        assert abs(got - ref) / ref < 1e-8, (mu, sigma, a0, d)
        got80 = unconditional_prob([[0.0]], [[0.0]], p, a, nodes=80)[0]
        assert abs(got - got80) / got80 < 1e-9


@pytest.mark.parametrize("group", [1, 0])
def test_quadrature_converged_on_published_fixture(group):
    d = generate_study(ireland_spec(seed=2024), 0).pools[group]
    p, a = published_params()[group]
    X, V = d.matrix(d.x_names), d.matrix(d.v_names)
    r40 = unconditional_prob(X, V, p, a, nodes=40)
    r80 = unconditional_prob(X, V, p, a, nodes=80)
    assert np.max(np.abs(r40 - r80) / r80) < 1e-9


def test_unconditional_prob_needs_ten_nodes():
    p, a = one_unit(0, 1, 0, 1)
    with pytest.raises(ValueError):
        unconditional_prob([[0.0]], [[0.0]], p, a, nodes=8)


# sample pdf & cdf -------------------------------------------------------------------

def test_sample_pdf_ignorable_is_normal():
    p, a = one_unit(0.3, 0.8, 1.1, 0.0)
    ys = np.linspace(-3, 4, 50)
    got = sample_pdf(ys, np.zeros((50, 1)), np.zeros((50, 1)), p, a)
    np.testing.assert_allclose(got, stats.norm.pdf(ys, 0.3, 0.8), rtol=1e-12, atol=1e-15)


def _pdf_integral(p, a, x, v):
    mu = float(p.mean(x))
    f = lambda s: sample_pdf([s], [x], [v], p, a)[0]
    return integrate.quad(f, mu - 10 * p.sigma, mu + 10 * p.sigma, epsabs=0, epsrel=1e-12, limit=200)[0]


def test_sample_pdf_normalizes_private_fit():
    x = np.array([1.0, 1.0, 0.3, -0.2, 0.5])
    v = np.array([1.0, 0.3, -0.2, 0.5, 1.0])
    assert abs(_pdf_integral(PRIVATE_POP, PRIVATE_ASSIGN, x, v) - 1) < 1e-8


def test_sample_pdf_normalizes_random_fixtures():
    for mu, sigma, a0, d in random_fixtures(seed=1):
        p, a = one_unit(mu, sigma, a0, d)
        assert abs(_pdf_integral(p, a, np.zeros(1), np.zeros(1)) - 1) < 1e-8


def test_positive_delta_shifts_sample_mean_up():
    for mu, sigma, a0, d in random_fixtures(k=10, seed=2):
        p, a = one_unit(mu, sigma, a0, abs(d) + 0.1)
        m = integrate.quad(lambda s: s * sample_pdf([s], [[0.0]], [[0.0]], p, a)[0],
                           mu - 12 * sigma, mu + 12 * sigma, limit=200)[0]
        assert m > mu


def test_sample_cdf_matches_adaptive_quadrature():
    for mu, sigma, a0, d in random_fixtures(k=10, seed=3):
        p, a = one_unit(mu, sigma, a0, d)
        for y in (mu - 2 * sigma, mu, mu + 1.5 * sigma):
            f = _tilted(mu, sigma, a0, d)
            lo = integrate.quad(f, -np.inf, y, epsabs=0, epsrel=1e-12)[0]
            tot = lo + integrate.quad(f, y, np.inf, epsabs=0, epsrel=1e-12)[0]
            assert sample_cdf([y], [[0.0]], [[0.0]], p, a)[0] == pytest.approx(lo / tot, abs=1e-10)


# full likelihood ----------------------------------------------------------------------

def _fixture50(seed=0):
    rng = np.random.default_rng(seed)
    n = 50
    x1, x2, s = rng.normal(size=(3, n))
    y = 0.5 + 0.6 * x1 - 0.3 * x2 + 0.9 * rng.normal(size=n)
    t = (rng.random(n) < special.expit(-0.2 + 0.7 * y + 0.4 * s)).astype(int)
    return from_arrays(y, t, {"x1": x1, "x2": x2, "s": s}, ["x1", "x2"], ["x1", "s"])


def test_ignorable_loglik_closed_form():
    y, x, v = np.array([0.7, -0.2, 1.4]), np.array([0.4, -1.0, 0.3]), np.array([1.5, 0.2, -0.6])
    d = from_arrays(y, [1, 1, 1], {"x": x, "v": v}, ["x"], ["v"])
    p = PopulationParams(0.2, [0.5], 0.9)
    a = AssignmentParams(-0.3, 0.0, [0.8])
    want = np.sum(np.log(special.expit(-0.3 + 0.8 * v)) + stats.norm.logpdf(y, 0.2 + 0.5 * x, 0.9))
    assert full_loglik(d, 1, p, a) == pytest.approx(want, abs=1e-12)


def test_out_of_group_units_use_complement_probability():
    y, x, v = np.array([0.0, 0.5, -0.4, 9.9]), np.array([0.0, 0.2, -0.3, 1.0]), np.array([0.0, 1.0, 0.5, 2.0])
    d = from_arrays(y, [1, 1, 1, 0], {"x": x, "v": v}, ["x"], ["v"])
    p = PopulationParams(0.1, [0.3], 1.2)
    a = AssignmentParams(0.4, 0.7, [-0.5])
    m = slice(0, 3)
    in_terms = np.sum(np.log(special.expit(0.4 + 0.7 * y[m] - 0.5 * v[m]))
                      + stats.norm.logpdf(y[m], 0.1 + 0.3 * x[m], 1.2))
    q = integrate.quad(lambda s: special.expit(-(0.4 + 0.7 * s - 1.0)) * stats.norm.pdf(s, 0.4, 1.2),
                       -np.inf, np.inf, epsabs=0, epsrel=1e-13)[0]
    # the non-member's response never enters
    assert full_loglik(d, 1, p, a) == pytest.approx(in_terms + np.log(q), abs=1e-10)


@pytest.mark.parametrize("group", [1, 0])
def test_score_matches_finite_differences(group):
    d = _fixture50()
    lik = GroupLikelihood(d, group)
    rng = np.random.default_rng(group)
    for _ in range(10):
        theta = np.r_[rng.normal(0, 0.5, 3), rng.uniform(-0.5, 0.3), rng.normal(0, 0.7, 4)]
        g = lik.evaluate(theta)[1]
        num = np.empty_like(theta)
        for j in range(theta.size):
            h = 1e-5 * max(1.0, abs(theta[j]))
            e = np.zeros_like(theta)
            e[j] = h
            num[j] = (lik.loglik(theta + e) - lik.loglik(theta - e)) / (2 * h)
        rel = np.max(np.abs(g - num)) / max(1.0, np.max(np.abs(num)))
        assert rel < 1e-4


@pytest.mark.parametrize("group", [1, 0])
def test_analytic_hessian_matches_differenced_score(group):
    d = _fixture50(1)
    lik = GroupLikelihood(d, group)
    rng = np.random.default_rng(10 + group)
    for _ in range(5):
        theta = np.r_[rng.normal(0, 0.5, 3), rng.uniform(-0.5, 0.3), rng.normal(0, 0.7, 4)]
        H = lik.evaluate(theta, order=2)[2]
        Hn = numeric_hessian(lik, theta)
        assert np.max(np.abs(H - Hn)) / max(1.0, np.max(np.abs(Hn))) < 1e-6


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_term_names_row():
    d = _fixture50()
    p = PopulationParams(0.0, [0.0, 0.0], 1e-200)
    a = AssignmentParams(0.0, 0.0, [0.0, 0.0])
    with pytest.raises(SampleModelError, match="row"):
        full_loglik(d, 1, p, a)


def test_conditional_loglik_reduces_when_ignorable():
    d = _fixture50(2)
    p = PopulationParams(0.5, [0.6, -0.3], 0.9)
    a = AssignmentParams(-0.2, 0.0, [0.1, 0.4])
    m = d.t == 1
    want = stats.norm.logpdf(d.y[m], p.mean(d.x[m]), 0.9).sum()
    assert conditional_loglik(d, 1, p, a) == pytest.approx(want, abs=1e-9)


# fitting ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ireland_study():
    return generate_study(ireland_spec(seed=77), 0)


@pytest.fixture(scope="module")
def ireland_fits(ireland_study):
    return fit_mle(ireland_study.pools[1], 1), fit_mle(ireland_study.pools[0], 0)


def test_extreme_log_sigma_is_minus_infinity():
    lik = GroupLikelihood(_fixture50(), 1)
    theta = np.zeros(lik.npar)
    theta[lik.isg] = 4540.0
    ll, g = lik.evaluate(theta)
    assert ll == -np.inf and np.all(np.isnan(g))


def test_newton_from_wild_start_does_not_raise():
    d = _fixture50(3)
    good = fit_mle(d, 1)
    wild = SampleModelFit(1, PopulationParams(-4000.0, [700.0, 300.0], 1e3), AssignmentParams(
        4000.0, 2000.0, [-1000.0, 3000.0]), None, good.names, good.x_names, good.v_names,
        0.0, 40, True, 0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit_mle(d, 1, init=wild, compute_covariance=False)


def test_exclusion_restriction_enforced():
    d = _fixture50().with_roles(["x1"], ["x1", "s"])
    with pytest.raises(ValidationError, match="not in the assignment"):
        fit_mle(d, 1)


def test_fit_properties(ireland_study, ireland_fits):
    for f in ireland_fits:
        assert f.converged and f.gradient_norm < 1e-6
        assert f.loglik >= max(f.start_logliks)
        C = f.covariance
        np.testing.assert_allclose(C, C.T, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(C) > 0)
        assert f.names[len(f.x_names) + 1] == "sigma"
        lik = GroupLikelihood(ireland_study.pools[f.group], f.group)
        assert lik.loglik(f.packed()) == pytest.approx(f.loglik, abs=1e-8)


def test_fit_beats_truth(ireland_study, ireland_fits):
    truth = published_params()
    for f in ireland_fits:
        lik = GroupLikelihood(ireland_study.pools[f.group], f.group)
        at_truth = lik.loglik(lik.pack(*truth[f.group]))
        assert f.loglik >= at_truth


def test_refit_from_optimum_is_stationary(ireland_study, ireland_fits):
    f1 = ireland_fits[0]
    again = fit_mle(ireland_study.pools[1], 1, init=f1)
    np.testing.assert_allclose(again.vector, f1.vector, atol=1e-6)


def test_json_round_trip(ireland_fits):
    f = ireland_fits[1]
    back = SampleModelFit.from_dict(json.loads(json.dumps(f.to_dict())))
    np.testing.assert_array_equal(back.vector, f.vector)
    np.testing.assert_array_equal(back.covariance, f.covariance)
    assert back.quadrature == 40 and back.names == f.names


def test_public_fit_reproduces_negative_delta(ireland_fits):
    f0 = ireland_fits[1]
    d, se = f0.param("delta")
    assert d < 0 and abs(d / se) > 1.96


# population means ---------------------------------------------------------------------

def test_mean_pop_zero_slopes(ireland_fits):
    f = ireland_fits[0]
    zero = SampleModelFit(f.group, PopulationParams(f.pop.beta0, np.zeros(5), f.pop.sigma), f.assign,
                          f.covariance, f.names, f.x_names, f.v_names, f.loglik, 40, True, 0.0)
    assert mean_pop(zero, np.ones(5))[0] == f.pop.beta0


def test_mean_pop_equals_mean_sample_at_sample_mean(ireland_study, ireland_fits):
    f = ireland_fits[1]
    X = ireland_study.data.matrix(f.x_names)
    a, b = mean_pop(f, X.mean(axis=0)), mean_sample(f, ireland_study.data)
    assert a[0] == pytest.approx(b[0], abs=1e-12)
    assert a[1] == pytest.approx(b[1], abs=1e-12)
    named = dict(zip(f.x_names, X.mean(axis=0)))
    assert mean_pop(f, named)[0] == pytest.approx(a[0], abs=1e-12)


def test_mean_sample_single_covariate_identity():
    d = from_arrays([0.0, 1.0, 2.0], [1, 0, 1], {"c": [2.0, 4.0, 9.0], "v": [0.0, 1.0, 0.0]}, ["c"], ["v"])
    f = SampleModelFit(1, PopulationParams(0.0, [1.0], 1.0), AssignmentParams(0.0, 0.0, [0.0]),
                       None, ["beta0", "beta[c]", "sigma", "gamma0", "delta", "gamma[v]"], ("c",),
                       ("v",), 0.0, 40, True, 0.0)
    assert mean_sample(f, d)[0] == pytest.approx(5.0)


def test_combined_equals_regression_form_with_zero_residuals():
    rng = np.random.default_rng(3)
    c = rng.normal(size=30)
    v = rng.normal(size=30)
    d = from_arrays(2 + 0.5 * c, np.arange(30) % 2, {"c": c, "v": v}, ["c"], ["v"])
    f = SampleModelFit(1, PopulationParams(2.0, [0.5], 1.0), AssignmentParams(0.3, 0.4, [0.2]),
                       None, ["beta0", "beta[c]", "sigma", "gamma0", "delta", "gamma[v]"], ("c",),
                       ("v",), 0.0, 40, True, 0.0)
    assert mean_combined(f, d, n_boot=0)[0] == pytest.approx(mean_sample(f, d)[0], abs=1e-12)


def test_combined_warns_on_tiny_probabilities():
    c = np.linspace(-1, 1, 20)
    d = from_arrays(np.full(20, 50.0), np.ones(20, int) % 2, {"c": c, "v": c}, ["c"], ["v"])
    f = SampleModelFit(1, PopulationParams(0.0, [0.0], 1.0), AssignmentParams(0.0, -1.0, [0.0]),
                       None, ["beta0", "beta[c]", "sigma", "gamma0", "delta", "gamma[v]"], ("c",),
                       ("v",), 0.0, 40, True, 0.0)
    with pytest.warns(RuntimeWarning, match="20 fitted assignment probabilities"):
        mean_combined(f, d, n_boot=0)


def test_combined_bootstrap_se_deterministic(ireland_study, ireland_fits):
    f = ireland_fits[0]
    a = mean_combined(f, ireland_study.pools[1], n_boot=20, seed=4)
    b = mean_combined(f, ireland_study.pools[1], n_boot=20, seed=4)
    assert a == b and 0 < a[1] < 0.5


# weighting ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ignorable_data():
    return generate_study(ignorable_spec(seed=5, n_population=800), 0).data


def test_equal_weights_match_unweighted(ignorable_data):
    eq = ignorable_data.replace(w=np.full(ignorable_data.n, 3.0))
    a = ate_sample_model(ignorable_data, n_boot=0)
    b = ate_sample_model(eq, weighted=True, n_boot=0)
    for ra, rb in ((a.regression, b.regression), (a.combined, b.combined)):
        assert rb.tau == pytest.approx(ra.tau, abs=1e-10)
    np.testing.assert_allclose(b.fits[0].vector, a.fits[0].vector, atol=1e-9)
    np.testing.assert_allclose(b.fits[0].covariance, a.fits[0].covariance, rtol=1e-6, atol=1e-12)


def test_weight_scaling_invariance(ignorable_data):
    rng = np.random.default_rng(1)
    wd = ignorable_data.replace(w=rng.uniform(0.5, 2.0, ignorable_data.n))
    a = ate_sample_model(wd, weighted=True, n_boot=0)
    b = ate_sample_model(wd.replace(w=wd.w * 40), weighted=True, n_boot=0)
    assert b.regression.tau == pytest.approx(a.regression.tau, abs=1e-9)
    assert b.combined.tau == pytest.approx(a.combined.tau, abs=1e-9)


def test_ate_sample_model_reports(ignorable_data):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = ate_sample_model(ignorable_data, n_boot=10, seed=2)
    assert res.regression.method == "SampleMLE-S"
    assert res.combined.method == "SampleMLE-C"
    assert res.regression.se > 0 and res.combined.se > 0
    assert math.isclose(res.regression.tau, res.regression.mu1 - res.regression.mu0)


@pytest.mark.slow
def test_delta_insignificant_under_ignorable_truth():
    spec = ignorable_spec(seed=31, n_population=1000)
    z = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for r in range(100):
            f = fit_mle(generate_study(spec, r).data, 1)
            d, se = f.param("delta")
            z.append(d / se)
    share = np.mean(np.abs(z) < 1.96)
    assert 0.88 <= share <= 1.0
    assert abs(np.mean(z)) < 4 / math.sqrt(100)
