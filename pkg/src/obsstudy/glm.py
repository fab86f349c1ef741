"""Least squares, logistic and probit regression.

All fitters take a design matrix whose first column is the intercept and
return a :class:`FitResult`.  Logistic and probit fits use Newton's method
with step-halving; sampling weights enter as pseudo-likelihood weights
normalized to mean one, so rescaling all weights leaves every output
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

PROB_EPS = 1e-12
SEPARATION_BOUND = 30.0
GRAD_TOL = 1e-8
MAX_ITER = 100


class SingularDesignError(np.linalg.LinAlgError):
    def __init__(self, message: str, column: str | None = None):
        super().__init__(message)
        self.column = column


class SeparationError(RuntimeError):
    """Linear predictor diverged; the classes are (quasi-)separated."""


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    names: tuple[str, ...]

    @property
    def shape(self):
        return self.values.shape


def design(X: np.ndarray, names: Sequence[str] | None = None,
           intercept: str = "const") -> DesignMatrix:
    """Prepend an intercept column of ones to ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if names is None:
        names = [f"x{j}" for j in range(X.shape[1])]
    return DesignMatrix(np.column_stack([np.ones(X.shape[0]), X]), (intercept, *names))


def _unpack(X) -> tuple[np.ndarray, tuple[str, ...]]:
    if isinstance(X, DesignMatrix):
        return X.values, X.names
    X = np.asarray(X, dtype=float)
    return X, tuple(f"col{j}" for j in range(X.shape[1]))


@dataclass
class FitResult:
    coefficients: np.ndarray
    covariance: np.ndarray
    names: tuple[str, ...]
    scale: float | None = None
    loglik: float | None = None
    converged: bool = True
    iterations: int = 0
    gradient_norm: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def z_scores(self) -> np.ndarray:
        return self.coefficients / self.se


def norm_cdf(x):
    return special.ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def mills_ratio(s):
    """phi(s) / Phi(s), stable for large negative ``s``."""
    s = np.asarray(s, dtype=float)
    return np.exp(-0.5 * s * s - 0.5 * np.log(2.0 * np.pi) - special.log_ndtr(s))


def _check_rank(R: np.ndarray, names: Sequence[str], tol: float = 1e-10) -> None:
    d = np.abs(np.diag(R))
    scale = d.max() if d.size else 0.0
    bad = np.flatnonzero(d <= tol * max(scale, 1.0))
    if bad.size:
        j = int(bad[0])
        raise SingularDesignError(
            f"design matrix is rank deficient: column {names[j]!r} is collinear with earlier columns",
            column=names[j],
        )


def fit_wls(X, y, weights=None) -> FitResult:
    """Weighted least squares via QR of the sqrt-weighted design.

    The covariance is ``s^2 (X'WX)^-1`` with ``s^2`` the weighted residual
    sum of squares over ``n - p``; ``scale`` is ``s``.
    """
    Xv, names = _unpack(X)
    y = np.asarray(y, dtype=float)
    n, p = Xv.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if n <= p:
        raise SingularDesignError(f"need more rows than columns (n={n}, p={p})")
    sw = np.sqrt(w)
    Q, R = np.linalg.qr(Xv * sw[:, None])
    _check_rank(R, names)
    beta = np.linalg.solve(R, Q.T @ (y * sw))
    resid = y - Xv @ beta
    s2 = float(w @ resid**2) / (n - p)
    Rinv = np.linalg.solve(R, np.eye(p))
    cov = s2 * (Rinv @ Rinv.T)
    return FitResult(beta, 0.5 * (cov + cov.T), names, scale=float(np.sqrt(s2)),
                     extra={"residuals": resid})


def _logit_parts(eta, t, w):
    p = special.expit(eta)
    ll = float(w @ (t * eta - np.logaddexp(0.0, eta)))
    score_i = w * (t - p)
    curv = w * p * (1.0 - p)
    return ll, score_i, curv


def _probit_parts(eta, t, w):
    q = 2.0 * t - 1.0
    s = q * eta
    ll = float(w @ special.log_ndtr(s))
    lam = mills_ratio(s)
    score_i = w * q * lam
    curv = w * lam * (s + lam)
    return ll, score_i, curv


_LINKS = {"logit": _logit_parts, "probit": _probit_parts}


def _fit_binary(X, t, weights, link: str) -> FitResult:
    Xv, names = _unpack(X)
    t = np.asarray(t, dtype=float)
    n, p = Xv.shape
    if not (np.any(t == 1) and np.any(t == 0)):
        raise SeparationError("both outcome classes must be present")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.mean()
    _check_rank(np.linalg.qr(Xv, mode="r"), names)
    parts = _LINKS[link]
    beta = np.zeros(p)
    ll, score_i, curv = parts(Xv @ beta, t, w)
    for it in range(1, MAX_ITER + 1):
        g = Xv.T @ score_i
        H = (Xv * curv[:, None]).T @ Xv
        step = np.linalg.solve(H, g)
        lam = 1.0
        while True:
            cand = beta + lam * step
            eta = Xv @ cand
            if np.max(np.abs(eta)) > SEPARATION_BOUND:
                raise SeparationError(
                    f"{link} fit diverged (|linear predictor| > {SEPARATION_BOUND}); "
                    "the data look separated"
                )
            ll_new, s_new, c_new = parts(eta, t, w)
            if ll_new >= ll - 1e-12 * abs(ll) or lam < 1e-10:
                break
            lam *= 0.5
        beta, ll, score_i, curv = cand, ll_new, s_new, c_new
        gnorm = float(np.max(np.abs(Xv.T @ score_i)))
        if gnorm < GRAD_TOL:
            break
    else:
        raise ConvergenceError(f"{link} fit did not converge in {MAX_ITER} iterations")
    H = (Xv * curv[:, None]).T @ Xv
    cov = np.linalg.inv(H)
    return FitResult(beta, 0.5 * (cov + cov.T), names, loglik=ll, converged=True,
                     iterations=it, gradient_norm=gnorm, extra={"link": link})


def fit_logit(X, t, weights=None) -> FitResult:
    return _fit_binary(X, t, weights, "logit")


def fit_probit(X, t, weights=None) -> FitResult:
    return _fit_binary(X, t, weights, "probit")


def fit_binary(X, t, weights=None, link: str = "logit") -> FitResult:
    if link not in _LINKS:
        raise ValueError(f"unknown link {link!r}")
    return _fit_binary(X, t, weights, link)


def predict_prob(fit: FitResult, X, link: str = "logit") -> np.ndarray:
    """Fitted probabilities clamped to [1e-12, 1 - 1e-12]."""
    Xv, _ = _unpack(X)
    if Xv.shape[1] != fit.coefficients.size:
        raise ValueError(
            f"design has {Xv.shape[1]} columns but the fit has {fit.coefficients.size} coefficients"
        )
    eta = Xv @ fit.coefficients
    if link == "logit":
        p = special.expit(eta)
    elif link == "probit":
        p = special.ndtr(eta)
    else:
        raise ValueError(f"unknown link {link!r}")
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
