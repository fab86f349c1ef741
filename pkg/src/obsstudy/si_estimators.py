"""ATE estimators that assume strongly ignorable assignment given covariates.

Each estimator has an unweighted form and a probability-weighted form.  In
the weighted form every unit-level summand and every normalizing count is
multiplied by the unit's sampling weight (Hajek convention), and the
propensity/outcome regressions are fitted with the weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .dataset import StudyData, ValidationError, split_groups
from .glm import FitResult, design, fit_binary, fit_wls, mills_ratio, predict_prob, PROB_EPS
from .reports import AteReport


class EmptyGroupError(ValidationError):
    pass


class DegeneratePropensityError(ValidationError):
    pass


def _weights(data: StudyData, weighted: bool) -> np.ndarray:
    return data.w if weighted else np.ones(data.n)


def _require_groups(data: StudyData, min_size: int = 1) -> None:
    n1 = int(data.t.sum())
    n0 = data.n - n1
    if min(n1, n0) < min_size:
        raise EmptyGroupError(f"each treatment group needs at least {min_size} units (sizes {n1}, {n0})")


def m_estimator_covariance(psi: Callable[[np.ndarray], np.ndarray], theta: np.ndarray,
                           rel_step: float = 1e-6) -> np.ndarray:
    """Empirical sandwich ``A^-1 B A^-T`` for stacked estimating equations.

    ``psi(theta)`` returns the (n, k) matrix of unit-level estimating
    function values whose column sums vanish at ``theta``.  The bread ``A``
    is the Jacobian of the column sums, by central differences.
    """
    theta = np.asarray(theta, dtype=float)
    k = theta.size
    A = np.empty((k, k))
    for j in range(k):
        h = rel_step * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        A[:, j] = (psi(tp).sum(axis=0) - psi(tm).sum(axis=0)) / (2 * h)
    P = psi(theta)
    B = P.T @ P
    Ainv = np.linalg.inv(A)
    V = Ainv @ B @ Ainv.T
    return 0.5 * (V + V.T)


def _binary_score(Z: np.ndarray, t: np.ndarray, coef: np.ndarray, link: str) -> np.ndarray:
    eta = Z @ coef
    if link == "logit":
        r = t - special.expit(eta)
    else:
        q = 2.0 * t - 1.0
        r = q * mills_ratio(q * eta)
    return Z * r[:, None]


def _inv_link(eta: np.ndarray, link: str) -> np.ndarray:
    p = special.expit(eta) if link == "logit" else special.ndtr(eta)
    return np.clip(p, PROB_EPS, 1 - PROB_EPS)


@dataclass
class PropensityModel:
    """Fitted Pr(T = 1 | z) with the design it was fitted on."""

    fit: FitResult
    names: tuple[str, ...]
    link: str = "logit"
    weighted: bool = False

    def design(self, data: StudyData) -> np.ndarray:
        return design(data.matrix(self.names), self.names).values

    def predict(self, data: StudyData) -> np.ndarray:
        return predict_prob(self.fit, self.design(data), self.link)


def fit_propensity(data: StudyData, names: Sequence[str] | None = None, link: str = "logit",
                   weighted: bool = False) -> PropensityModel:
    """Regress T on (1, z); ``z`` defaults to the union of x and v."""
    names = data.z_names if names is None else tuple(names)
    X = design(data.matrix(names), names)
    fit = fit_binary(X, data.t, _weights(data, weighted), link=link)
    return PropensityModel(fit, names, link, weighted)


def _check_propensity(e: np.ndarray) -> None:
    if np.all((e <= 10 * PROB_EPS) | (e >= 1 - 10 * PROB_EPS)):
        raise DegeneratePropensityError("all estimated propensity scores are at 0 or 1")


def _hajek_mean_var(y: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    m = float(w @ y / w.sum())
    v = float((w**2) @ (y - m) ** 2) / w.sum() ** 2
    return m, v


def ate_difference(data: StudyData, weighted: bool = False) -> AteReport:
    """Crude difference of the group means of y."""
    _require_groups(data, 2)
    g1, g0 = split_groups(data)
    if weighted:
        m1, v1 = _hajek_mean_var(g1.y, g1.w)
        m0, v0 = _hajek_mean_var(g0.y, g0.w)
    else:
        m1, m0 = g1.y.mean(), g0.y.mean()
        v1 = g1.y.var(ddof=1) / g1.n_t
        v0 = g0.y.var(ddof=1) / g0.n_t
    return AteReport("Diff", m1, m0, math.sqrt(v1 + v0), weighted,
                     {"n1": g1.n_t, "n0": g0.n_t})


def _group_regressions(data: StudyData, names: Sequence[str], weighted: bool):
    g1, g0 = split_groups(data)
    w = _weights(data, weighted)
    fits = []
    for g in (g1, g0):
        X = design(g.matrix(names), names)
        fits.append(fit_wls(X, g.y, w[g.indices]))
    return fits[0], fits[1]


def _xbar(data: StudyData, names: Sequence[str], weighted: bool) -> np.ndarray:
    X = design(data.matrix(names), names).values
    w = _weights(data, weighted)
    return w @ X / w.sum()


def ate_regression(data: StudyData, weighted: bool = False,
                   names: Sequence[str] | None = None) -> AteReport:
    """Per-group least squares evaluated at the full-sample covariate mean."""
    _require_groups(data, 1)
    names = data.x_names if names is None else tuple(names)
    f1, f0 = _group_regressions(data, names, weighted)
    xbar = _xbar(data, names, weighted)
    mu1, mu0 = xbar @ f1.coefficients, xbar @ f0.coefficients
    se = math.sqrt(float(xbar @ (f1.covariance + f0.covariance) @ xbar))
    return AteReport("OLS", mu1, mu0, se, weighted, {
        "beta1": f1.coefficients, "beta0": f0.coefficients, "names": list(f1.names)})


def _match_impute(Xq: np.ndarray, Xr: np.ndarray, yr: np.ndarray, m: int,
                  chunk: int = 256) -> np.ndarray:
    """Mean response of the m nearest reference rows for each query row.

    Distances are exact squared Euclidean; ties go to the lowest reference
    row index through a stable sort.
    """
    out = np.empty(Xq.shape[0])
    for s in range(0, Xq.shape[0], chunk):
        d = ((Xq[s:s + chunk, None, :] - Xr[None, :, :]) ** 2).sum(axis=2)
        nn = np.argsort(d, axis=1, kind="stable")[:, :m]
        out[s:s + chunk] = yr[nn].mean(axis=1)
    return out


def _matching_point(X: np.ndarray, y: np.ndarray, t: np.ndarray, w: np.ndarray, m: int):
    i1 = np.flatnonzero(t == 1)
    i0 = np.flatnonzero(t == 0)
    yhat1 = y.copy()
    yhat0 = y.copy()
    yhat0[i1] = _match_impute(X[i1], X[i0], y[i0], m)
    yhat1[i0] = _match_impute(X[i0], X[i1], y[i1], m)
    W = w.sum()
    return float(w @ yhat1 / W), float(w @ yhat0 / W)


def ate_matching(data: StudyData, m: int = 4, weighted: bool = False,
                 names: Sequence[str] | None = None, n_boot: int = 200,
                 seed: int = 0) -> AteReport:
    """Nearest-neighbour matching with replacement on Euclidean distance.

    The standard error is a nonparametric bootstrap that resamples units
    within each treatment group; ``n_boot=0`` skips it.
    """
    names = data.x_names if names is None else tuple(names)
    _require_groups(data, m)
    X = data.matrix(names)
    w = _weights(data, weighted)
    mu1, mu0 = _matching_point(X, data.y, data.t, w, m)
    se = math.nan
    if n_boot:
        rng = np.random.default_rng(seed)
        i1 = np.flatnonzero(data.t == 1)
        i0 = np.flatnonzero(data.t == 0)
        taus = np.empty(n_boot)
        for b in range(n_boot):
            idx = np.concatenate([rng.choice(i1, i1.size), rng.choice(i0, i0.size)])
            b1, b0 = _matching_point(X[idx], data.y[idx], data.t[idx], w[idx], m)
            taus[b] = b1 - b0
        se = float(taus.std(ddof=1))
    return AteReport("Match", mu1, mu0, se, weighted, {"m": m, "n_boot": n_boot})


def _resolve_propensity(data, prop, weighted, link):
    if prop is None:
        prop = fit_propensity(data, link=link, weighted=weighted)
    e = prop.predict(data)
    _check_propensity(e)
    return prop, e


def ate_brewer_hajek(data: StudyData, prop: PropensityModel | None = None,
                     weighted: bool = False, link: str = "logit") -> AteReport:
    """Ratio (Hajek-normalized) inverse-propensity weighting.

    The standard error is the sandwich of the stacked estimating equations
    for the propensity coefficients and the two group means, so it
    accounts for estimating the propensity scores.
    """
    _require_groups(data, 1)
    prop, e = _resolve_propensity(data, prop, weighted, link)
    t = data.t.astype(float)
    y = data.y
    w = _weights(data, weighted)
    mu1 = float(np.sum(w * t * y / e) / np.sum(w * t / e))
    mu0 = float(np.sum(w * (1 - t) * y / (1 - e)) / np.sum(w * (1 - t) / (1 - e)))

    Z = prop.design(data)
    wp = w if prop.weighted else np.ones(data.n)
    k = Z.shape[1]

    def psi(theta):
        a, m1, m0 = theta[:k], theta[k], theta[k + 1]
        ee = _inv_link(Z @ a, prop.link)
        return np.column_stack([
            _binary_score(Z, t, a, prop.link) * wp[:, None],
            w * t * (y - m1) / ee,
            w * (1 - t) * (y - m0) / (1 - ee),
        ])

    V = m_estimator_covariance(psi, np.r_[prop.fit.coefficients, mu1, mu0])
    c = np.zeros(k + 2)
    c[k], c[k + 1] = 1.0, -1.0
    se = math.sqrt(max(float(c @ V @ c), 0.0))
    return AteReport("BH", mu1, mu0, se, weighted, {"link": prop.link})


def ate_doubly_robust(data: StudyData, prop: PropensityModel | None = None,
                      weighted: bool = False, link: str = "logit",
                      names: Sequence[str] | None = None) -> AteReport:
    """Augmented inverse-propensity estimator with per-group linear outcome models."""
    _require_groups(data, 1)
    names = data.x_names if names is None else tuple(names)
    prop, e = _resolve_propensity(data, prop, weighted, link)
    f1, f0 = _group_regressions(data, names, weighted)
    X = design(data.matrix(names), names).values
    t = data.t.astype(float)
    y = data.y
    w = _weights(data, weighted)
    W = w.sum()

    def terms(e_, b1, b0):
        r1, r0 = X @ b1, X @ b0
        a1 = (t * y - (t - e_) * r1) / e_
        a0 = ((1 - t) * y + (t - e_) * r0) / (1 - e_)
        return a1, a0

    a1, a0 = terms(e, f1.coefficients, f0.coefficients)
    mu1, mu0 = float(w @ a1 / W), float(w @ a0 / W)

    Z = prop.design(data)
    wp = w if prop.weighted else np.ones(data.n)
    k, p = Z.shape[1], X.shape[1]

    def psi(theta):
        a = theta[:k]
        b1 = theta[k:k + p]
        b0 = theta[k + p:k + 2 * p]
        m1, m0 = theta[-2], theta[-1]
        ee = _inv_link(Z @ a, prop.link)
        u1, u0 = terms(ee, b1, b0)
        return np.column_stack([
            _binary_score(Z, t, a, prop.link) * wp[:, None],
            X * (w * t * (y - X @ b1))[:, None],
            X * (w * (1 - t) * (y - X @ b0))[:, None],
            w * (u1 - m1),
            w * (u0 - m0),
        ])

    theta = np.r_[prop.fit.coefficients, f1.coefficients, f0.coefficients, mu1, mu0]
    V = m_estimator_covariance(psi, theta)
    c = np.zeros(theta.size)
    c[-2], c[-1] = 1.0, -1.0
    se = math.sqrt(max(float(c @ V @ c), 0.0))
    return AteReport("DR", mu1, mu0, se, weighted, {"link": prop.link})
