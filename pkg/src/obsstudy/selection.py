"""Estimators that allow assignment to depend on unobservables.

``ate_heckman_lv`` is the two-step Heckman treatment-regression estimator
(probit selection, inverse-Mills corrected outcome regressions per group).
``ate_iv`` instruments the stacked two-group regression with fitted
assignment probabilities from a model that includes an instrument.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .dataset import StudyData, ValidationError
from .glm import FitResult, SingularDesignError, design, fit_binary, fit_probit, fit_wls, norm_pdf, predict_prob
from .reports import AteReport
from .si_estimators import _require_groups, _weights, _xbar

MILLS_CLAMP = 8.0
IV_COND_LIMIT = 1e12


class WeakInstrumentWarning(UserWarning):
    pass


@dataclass
class HeckmanFit:
    selection_fit: FitResult
    mills: np.ndarray
    outcome_fits: tuple[FitResult, FitResult]
    beta_lv: tuple[np.ndarray, np.ndarray]


def inverse_mills(index: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Selection correction: phi/Phi for treated, -phi/(1-Phi) for controls.

    The probit index is clamped to [-8, 8] so both ratios stay finite.
    """
    a = np.clip(index, -MILLS_CLAMP, MILLS_CLAMP)
    phi = norm_pdf(a)
    return np.where(t == 1, phi / special.ndtr(a), -phi / special.ndtr(-a))


def fit_heckman(data: StudyData, weighted: bool = False) -> HeckmanFit:
    _require_groups(data, 1)
    if set(data.v_names) == set(data.x_names):
        warnings.warn("selection covariates v equal outcome covariates x; the "
                      "correction is identified only through the probit nonlinearity",
                      stacklevel=3)
    w = _weights(data, weighted)
    V = design(data.v, data.v_names)
    sel = fit_probit(V, data.t, w)
    lam = inverse_mills(V.values @ sel.coefficients, data.t)
    fits, betas = [], []
    p = len(data.x_names) + 1
    for g in (1, 0):
        idx = np.flatnonzero(data.t == g)
        X = design(np.column_stack([data.x[idx], lam[idx]]), (*data.x_names, "mills"))
        f = fit_wls(X, data.y[idx], w[idx])
        fits.append(f)
        betas.append(f.coefficients[:p])
    return HeckmanFit(sel, lam, (fits[0], fits[1]), (betas[0], betas[1]))


def ate_heckman_lv(data: StudyData, weighted: bool = False) -> AteReport:
    """Two-step latent-variable estimator evaluated at the full-sample x mean.

    The standard error uses the second-step covariance only, ignoring the
    first-step estimation error.
    """
    hf = fit_heckman(data, weighted)
    xbar = _xbar(data, data.x_names, weighted)
    p = xbar.size
    b1, b0 = hf.beta_lv
    V = hf.outcome_fits[0].covariance[:p, :p] + hf.outcome_fits[1].covariance[:p, :p]
    se = math.sqrt(float(xbar @ V @ xbar))
    return AteReport("LV", xbar @ b1, xbar @ b0, se, weighted, {
        "beta1": b1, "beta0": b0,
        "mills_coef1": float(hf.outcome_fits[0].coefficients[-1]),
        "mills_coef0": float(hf.outcome_fits[1].coefficients[-1]),
        "selection_coef": hf.selection_fit.coefficients,
    })


@dataclass
class IvDesign:
    instrument_name: str
    g_hat: np.ndarray
    z_hat: np.ndarray
    x_tilde: np.ndarray
    assignment_fit: FitResult | None = None


def iv_design(data: StudyData, instrument: str, weighted: bool = False,
              link: str = "logit", g_hat: np.ndarray | None = None) -> IvDesign:
    """Build the instrumented design; ``g_hat`` overrides the fitted probabilities."""
    if instrument not in data.names:
        raise ValidationError(f"instrument {instrument!r} is not a covariate")
    if instrument in data.x_names:
        raise ValidationError(f"instrument {instrument!r} must not be an outcome covariate")
    X = design(data.x, data.x_names).values
    fit = None
    if g_hat is None:
        names = (*data.x_names, instrument)
        G = design(data.matrix(names), names)
        fit = fit_binary(G, data.t, _weights(data, weighted), link=link)
        g_hat = predict_prob(fit, G, link)
        z = float(fit.z_scores[-1])
        if abs(z) < 1.96:
            warnings.warn(f"instrument {instrument!r} barely shifts Pr(T=1|x) (z = {z:.2f})",
                          WeakInstrumentWarning, stacklevel=3)
    g = np.asarray(g_hat, dtype=float)[:, None]
    t = data.t.astype(float)[:, None]
    return IvDesign(instrument, g.ravel(), np.hstack([g * X, (1 - g) * X]),
                    np.hstack([t * X, (1 - t) * X]), fit)


def ate_iv(data: StudyData, instrument: str, weighted: bool = False, link: str = "logit",
           g_hat: np.ndarray | None = None) -> AteReport:
    """Instrumental-variables estimator of the two groups' regression coefficients.

    Uses ``(sum z x~')^-1 sum z y`` with heteroskedasticity-robust sandwich
    variance.  A near-singular moment matrix raises
    :class:`SingularDesignError`.
    """
    _require_groups(data, 1)
    d = iv_design(data, instrument, weighted, link, g_hat)
    w = _weights(data, weighted)
    Zw = d.z_hat * w[:, None]
    A = Zw.T @ d.x_tilde
    if not np.isfinite(np.linalg.cond(A)) or np.linalg.cond(A) > IV_COND_LIMIT:
        raise SingularDesignError(
            f"IV moment matrix is singular (weak or uninformative instrument {instrument!r})")
    theta = np.linalg.solve(A, Zw.T @ data.y)
    resid = data.y - d.x_tilde @ theta
    M = Zw * resid[:, None]
    Ainv = np.linalg.inv(A)
    V = Ainv @ (M.T @ M) @ Ainv.T
    p = theta.size // 2
    b1, b0 = theta[:p], theta[p:]
    xbar = _xbar(data, data.x_names, weighted)
    c = np.r_[xbar, -xbar]
    se = math.sqrt(max(float(c @ V @ c), 0.0))
    details = {"beta1": b1, "beta0": b0, "instrument": instrument}
    if d.assignment_fit is not None:
        details["instrument_z"] = float(d.assignment_fit.z_scores[-1])
        details["weak_instrument"] = bool(abs(details["instrument_z"]) < 1.96)
    return AteReport("IV", xbar @ b1, xbar @ b0, se, weighted, details)
