"""Sample-distribution model for informative treatment assignment.

Within treatment group ``t`` the potential response follows a normal
population model ``N(beta0 + x'beta, sigma^2)`` and a unit joins the group
with probability ``logistic(gamma0 + delta*y + v'gamma)``.  The observed
response density is the population density tilted by that probability and
renormalized by its expectation over y (the unconditional assignment
probability), which is evaluated by Gauss-Hermite quadrature.

The group-``t`` full likelihood combines, for members, the assignment
probability and population density at the observed response, and for
non-members the complement of the unconditional probability.  It is
maximized over the packed vector
``(beta0, beta..., log sigma, gamma0, delta, gamma...)``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import optimize, special

from .dataset import StudyData, ValidationError
from .glm import design, fit_logit, fit_wls

log = logging.getLogger(__name__)

ASSIGN_EPS = 1e-15
DEFAULT_NODES = 40
GRAD_TOL = 1e-6
MAX_NEWTON_STEP = 5.0  # per-coordinate cap on a Newton step
_MAX_LOG_SIGMA = 700.0
_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class SampleModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class PopulationParams:
    beta0: float
    beta: np.ndarray
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def mean(self, x) -> np.ndarray:
        return self.beta0 + np.asarray(x, dtype=float) @ self.beta


def _unit_weights(data: StudyData, weighted: bool) -> np.ndarray:
    """Weights scaled to mean one; constant weights become exactly one."""
    if not weighted or np.all(data.w == data.w[0]):
        return np.ones(data.n)
    return data.w / data.w.mean()


@dataclass(frozen=True)
class AssignmentParams:
    gamma0: float
    delta: float
    gamma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=float)))

    def index(self, y, v) -> np.ndarray:
        return self.gamma0 + self.delta * np.asarray(y, dtype=float) + np.asarray(v, dtype=float) @ self.gamma


@lru_cache(maxsize=16)
def gauss_hermite(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes u and weights summing to one for E[f(Z)] with Z ~ N(0, 1/2)."""
    u, wts = np.polynomial.hermite.hermgauss(nodes)
    u.setflags(write=False)
    wts = wts / math.sqrt(math.pi)
    wts.setflags(write=False)
    return u, wts


@lru_cache(maxsize=8)
def gauss_legendre(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    s, wts = np.polynomial.legendre.leggauss(nodes)
    s.setflags(write=False)
    wts.setflags(write=False)
    return s, wts


def assignment_prob(y, v, a: AssignmentParams) -> np.ndarray:
    """Pr(unit in group | y, v) = logistic(gamma0 + delta*y + v'gamma), clamped."""
    return np.clip(special.expit(a.index(y, v)), ASSIGN_EPS, 1.0 - ASSIGN_EPS)


def unconditional_prob(x, v, p: PopulationParams, a: AssignmentParams,
                       nodes: int = DEFAULT_NODES) -> np.ndarray:
    """E over Y ~ N(mu, sigma^2) of the assignment probability, per unit.

    Uses ``y = mu + sqrt(2) sigma u`` at Gauss-Hermite nodes ``u``.
    """
    if nodes < 10:
        raise ValueError("use at least 10 quadrature nodes")
    u, wts = gauss_hermite(nodes)
    mu = np.atleast_1d(p.mean(x))
    base = np.atleast_1d(a.gamma0 + np.asarray(v, dtype=float) @ a.gamma) + a.delta * mu
    eta = base[:, None] + (a.delta * _SQRT2 * p.sigma) * u[None, :]
    return special.expit(eta) @ wts


def sample_pdf(y, x, v, p: PopulationParams, a: AssignmentParams,
               nodes: int = DEFAULT_NODES) -> np.ndarray:
    """Density of the observed response of a group member given (x, v)."""
    y = np.asarray(y, dtype=float)
    mu = p.mean(x)
    fp = np.exp(-0.5 * ((y - mu) / p.sigma) ** 2 - _LOG_SQRT_2PI) / p.sigma
    return assignment_prob(y, v, a) * fp / unconditional_prob(x, v, p, a, nodes)


def sample_cdf(y, x, v, p: PopulationParams, a: AssignmentParams,
               nodes: int = 96, width: float = 10.0) -> np.ndarray:
    """Fitted cdf of the observed response, evaluated at ``y`` per unit.

    The tilted density is integrated with Gauss-Legendre rules on
    ``[L, y]`` and ``[y, U]`` and the lower mass is normalized by the total,
    so results lie in [0, 1].  ``L, U`` are ``mu -/+ (width + |delta| sigma)
    sigma``; the extra ``|delta| sigma^2`` covers the mean shift induced by
    the assignment tilt.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mu = np.atleast_1d(p.mean(x)) * np.ones_like(y)
    base = np.atleast_1d(a.gamma0 + np.asarray(v, dtype=float) @ a.gamma) * np.ones_like(y)
    half = (width + abs(a.delta) * p.sigma) * p.sigma
    lo, hi = mu - half, mu + half
    yc = np.clip(y, lo, hi)
    s, wts = gauss_legendre(nodes)

    def mass(left, right):
        mid, rad = 0.5 * (left + right), 0.5 * (right - left)
        pts = mid[:, None] + rad[:, None] * s[None, :]
        r = (pts - mu[:, None]) / p.sigma
        dens = np.exp(-0.5 * r * r - _LOG_SQRT_2PI) * special.expit(base[:, None] + a.delta * pts)
        return rad * (dens @ wts)

    low, up = mass(lo, yc), mass(yc, hi)
    return low / (low + up)


def _group_mask(data: StudyData, t: int) -> np.ndarray:
    if t not in (0, 1):
        raise ValueError("group must be 0 or 1")
    return data.t == t


class GroupLikelihood:
    """Full log-likelihood of group ``t`` with analytic score and Hessian.

    Weighted fits multiply each unit's contribution by its sampling weight
    normalized to mean one (pseudo-likelihood).
    """

    def __init__(self, data: StudyData, t: int, nodes: int = DEFAULT_NODES,
                 weighted: bool = False):
        if nodes < 10:
            raise ValueError("use at least 10 quadrature nodes")
        self.data, self.t, self.nodes, self.weighted = data, t, nodes, weighted
        m = _group_mask(data, t)
        if m.sum() < len(data.x_names) + 2:
            raise SampleModelError(f"group {t} has too few members ({int(m.sum())})")
        X = design(data.x, data.x_names).values
        V = design(data.v, data.v_names).values
        w = _unit_weights(data, weighted)
        self.kx, self.kv = X.shape[1], V.shape[1]
        self.npar = self.kx + 1 + self.kv + 1
        self.Xin, self.Vin, self.yin, self.win = X[m], V[m], data.y[m], w[m]
        self.Xout, self.Vout, self.wout = X[~m], V[~m], w[~m]
        self.rows_in = np.flatnonzero(m)
        self.rows_out = np.flatnonzero(~m)
        kx = self.kx
        self.ib = np.arange(kx)
        self.isg = kx
        self.ia = np.r_[kx + 1, np.arange(kx + 3, self.npar)]
        self.idl = kx + 2
        self.u, self.wq = gauss_hermite(nodes)

    # packing -------------------------------------------------------------
    def names(self) -> list[str]:
        xn, vn = self.data.x_names, self.data.v_names
        return (["beta0", *(f"beta[{nm}]" for nm in xn), "log_sigma", "gamma0", "delta",
                 *(f"gamma[{nm}]" for nm in vn)])

    def pack(self, p: PopulationParams, a: AssignmentParams) -> np.ndarray:
        return np.r_[p.beta0, p.beta, math.log(p.sigma), a.gamma0, a.delta, a.gamma]

    def unpack(self, theta) -> tuple[PopulationParams, AssignmentParams]:
        kx = self.kx
        return (PopulationParams(theta[0], theta[1:kx], math.exp(theta[kx])),
                AssignmentParams(theta[kx + 1], theta[kx + 2], theta[kx + 3:]))

    # evaluation ----------------------------------------------------------
    def _split(self, theta):
        theta = np.asarray(theta, dtype=float)
        b = theta[self.ib]
        logsig = theta[self.isg]
        a = theta[self.ia]
        dl = theta[self.idl]
        return b, logsig, a, dl

    def loglik(self, theta) -> float:
        return self.evaluate(theta, order=0)[0]

    def terms(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Per-unit log-likelihood contributions (members, non-members), unweighted."""
        b, logsig, a, dl = self._split(theta)
        sig = math.exp(logsig)
        r = (self.yin - self.Xin @ b) / sig
        eta = self.Vin @ a + dl * self.yin
        t_in = -np.logaddexp(0.0, -eta) - 0.5 * r * r - logsig - _LOG_SQRT_2PI
        base = self.Vout @ a + dl * (self.Xout @ b)
        eta_o = base[:, None] + (dl * _SQRT2 * sig) * self.u[None, :]
        Q = special.expit(-eta_o) @ self.wq
        return t_in, np.log(np.maximum(Q, 1e-300))

    def evaluate(self, theta, order: int = 1):
        """Return (loglik,), (loglik, grad) or (loglik, grad, hess)."""
        b, logsig, a, dl = self._split(theta)
        if not abs(logsig) < _MAX_LOG_SIGMA:
            bad = (-math.inf, np.full(self.npar, np.nan), np.full((self.npar, self.npar), np.nan))
            return bad[:order + 1]
        sig = math.exp(logsig)
        npar = self.npar
        ib, isg, ia, idl = self.ib, self.isg, self.ia, self.idl
        c = _SQRT2 * sig

        # members
        X, V, y, w = self.Xin, self.Vin, self.yin, self.win
        r = (y - X @ b) / sig
        eta = V @ a + dl * y
        ll = float(w @ (-np.logaddexp(0.0, -eta) - 0.5 * r * r)) - w.sum() * (logsig + _LOG_SQRT_2PI)

        # non-members
        Xo, Vo, wo = self.Xout, self.Vout, self.wout
        mu_o = Xo @ b
        base = Vo @ a + dl * mu_o
        eta_o = base[:, None] + (dl * c) * self.u[None, :]
        q = special.expit(eta_o)
        omq = special.expit(-eta_o)
        Q = np.maximum(omq @ self.wq, 1e-300)
        ll += float(wo @ np.log(Q))
        if order == 0:
            return (ll,)

        g = np.zeros(npar)
        qin = special.expit(eta)
        g[ib] = X.T @ (w * r / sig)
        g[isg] = float(w @ (r * r - 1.0))
        g[ia] = V.T @ (w * (1.0 - qin))
        g[idl] = float(w @ ((1.0 - qin) * y))

        D = q * omq
        wu = self.wq * self.u
        d0 = D @ self.wq
        d1 = D @ wu
        f0 = wo * d0 / Q
        f1 = wo * d1 / Q
        g[ib] -= dl * (Xo.T @ f0)
        g[isg] -= dl * c * f1.sum()
        g[ia] -= Vo.T @ f0
        g[idl] -= float(f0 @ mu_o) + c * f1.sum()
        if order == 1:
            return ll, g

        H = np.zeros((npar, npar))
        # members: population block
        H[np.ix_(ib, ib)] = -(X * (w / sig**2)[:, None]).T @ X
        hbs = -2.0 * (X.T @ (w * r / sig))
        H[ib, isg] = hbs
        H[isg, ib] = hbs
        H[isg, isg] = -2.0 * float(w @ (r * r))
        # members: assignment block
        G = np.column_stack([V, y])
        ga = np.r_[ia, idl]
        H[np.ix_(ga, ga)] = -(G * (w * qin * (1.0 - qin))[:, None]).T @ G

        # non-members: d eta_jk = A_j + u_k B
        A = np.zeros((Xo.shape[0], npar))
        A[:, ib] = dl * Xo
        A[:, ia] = Vo
        A[:, idl] = mu_o
        Bv = np.zeros(npar)
        Bv[isg] = dl * c
        Bv[idl] = c
        E = D * (1.0 - 2.0 * q)
        e0 = E @ self.wq
        e1 = E @ wu
        e2 = E @ (wu * self.u)
        Q2 = Q * Q
        c0 = wo * (e0 / Q + d0 * d0 / Q2)
        c1 = wo * (e1 / Q + d0 * d1 / Q2)
        c2 = wo * (e2 / Q + d1 * d1 / Q2)
        Hout = (A * c0[:, None]).T @ A
        ac1 = A.T @ c1
        Hout += np.outer(ac1, Bv) + np.outer(Bv, ac1)
        Hout += c2.sum() * np.outer(Bv, Bv)
        xb = Xo.T @ f0
        Hout[ib, idl] += xb
        Hout[idl, ib] += xb
        Hout[isg, idl] += c * f1.sum()
        Hout[idl, isg] += c * f1.sum()
        Hout[isg, isg] += dl * c * f1.sum()
        H -= Hout
        return ll, g, H


def full_loglik(data: StudyData, t: int, p: PopulationParams, a: AssignmentParams,
                nodes: int = DEFAULT_NODES, weighted: bool = False) -> float:
    """Full log-likelihood of group ``t``; raises naming the first bad row."""
    lik = GroupLikelihood(data, t, nodes, weighted)
    theta = lik.pack(p, a)
    t_in, t_out = lik.terms(theta)
    for terms, rows in ((t_in, lik.rows_in), (t_out, lik.rows_out)):
        bad = np.flatnonzero(~np.isfinite(terms))
        if bad.size:
            raise SampleModelError(f"non-finite log-likelihood term at row {int(rows[bad[0]]) + 1}")
    return lik.loglik(theta)


def conditional_loglik(data: StudyData, t: int, p: PopulationParams, a: AssignmentParams,
                       nodes: int = DEFAULT_NODES) -> float:
    """Log of the product of sample pdfs over group members (diagnostic only)."""
    m = _group_mask(data, t)
    dens = sample_pdf(data.y[m], data.x[m], data.v[m], p, a, nodes)
    return float(np.sum(np.log(dens)))


@dataclass
class SampleModelFit:
    group: int
    pop: PopulationParams
    assign: AssignmentParams
    covariance: np.ndarray | None
    names: list[str]
    x_names: tuple[str, ...]
    v_names: tuple[str, ...]
    loglik: float
    quadrature: int
    converged: bool
    gradient_norm: float
    weighted: bool = False
    iterations: int = 0
    start_logliks: list[float] = field(default_factory=list)
    hessian_ok: bool = True

    @property
    def vector(self) -> np.ndarray:
        """Estimates in natural order (sigma rather than log sigma)."""
        return np.r_[self.pop.beta0, self.pop.beta, self.pop.sigma,
                     self.assign.gamma0, self.assign.delta, self.assign.gamma]

    @property
    def se(self) -> np.ndarray:
        if self.covariance is None:
            return np.full(self.vector.size, np.nan)
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def packed(self) -> np.ndarray:
        v = self.vector.copy()
        v[len(self.x_names) + 1] = math.log(self.pop.sigma)
        return v

    def param(self, name: str) -> tuple[float, float]:
        j = self.names.index(name)
        return float(self.vector[j]), float(self.se[j])

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "names": list(self.names),
            "x_names": list(self.x_names),
            "v_names": list(self.v_names),
            "values": self.vector.tolist(),
            "se": self.se.tolist(),
            "covariance": None if self.covariance is None else self.covariance.tolist(),
            "loglik": self.loglik,
            "quadrature": self.quadrature,
            "converged": self.converged,
            "gradient_norm": self.gradient_norm,
            "weighted": self.weighted,
            "hessian_ok": self.hessian_ok,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleModelFit":
        vals = np.asarray(d["values"], dtype=float)
        kx = len(d["x_names"]) + 1
        pop = PopulationParams(vals[0], vals[1:kx], vals[kx])
        assign = AssignmentParams(vals[kx + 1], vals[kx + 2], vals[kx + 3:])
        cov = None if d.get("covariance") is None else np.asarray(d["covariance"], dtype=float)
        return cls(int(d["group"]), pop, assign, cov, list(d["names"]), tuple(d["x_names"]),
                   tuple(d["v_names"]), float(d["loglik"]), int(d["quadrature"]),
                   bool(d["converged"]), float(d["gradient_norm"]), bool(d.get("weighted", False)),
                   hessian_ok=bool(d.get("hessian_ok", True)))


def _natural_names(lik: GroupLikelihood) -> list[str]:
    names = lik.names()
    names[lik.isg] = "sigma"
    return names


def default_starts(data: StudyData, t: int, weighted: bool = False,
                   deltas: Sequence[float] = (0.0, 0.5, -0.5)) -> list[np.ndarray]:
    """Per-group OLS for the population model and a logit of membership on v.

    For a non-zero start delta the intercept is shifted by ``-delta * mean(y)``
    so the average assignment index is unchanged.
    """
    m = _group_mask(data, t)
    w = _unit_weights(data, weighted)
    X = design(data.x[m], data.x_names)
    ols = fit_wls(X, data.y[m], w[m])
    memb = fit_logit(design(data.v, data.v_names), m.astype(float), w)
    ybar = float(np.average(data.y[m], weights=w[m]))
    starts = []
    for d in deltas:
        starts.append(np.r_[ols.coefficients, math.log(ols.scale), memb.coefficients[0] - d * ybar,
                            d, memb.coefficients[1:]])
    return starts


def _newton(lik: GroupLikelihood, theta: np.ndarray, max_iter: int = 50,
            tol: float = GRAD_TOL) -> tuple[np.ndarray, float, np.ndarray, np.ndarray, int]:
    """Damped Newton ascent with a Levenberg shift when the Hessian is not negative definite."""
    ll, g, H = lik.evaluate(theta, order=2)
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < tol:
            break
        negH = -H
        shift = 0.0
        diag_scale = max(1e-8, float(np.max(np.abs(np.diag(negH)))))
        while True:
            try:
                L = np.linalg.cholesky(negH + shift * np.eye(lik.npar))
                break
            except np.linalg.LinAlgError:
                shift = max(2 * shift, 1e-6 * diag_scale)
        step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        step *= min(1.0, MAX_NEWTON_STEP / float(np.max(np.abs(step))))
        lam = 1.0
        improved = False
        for _ in range(40):
            cand = theta + lam * step
            ll_c = lik.evaluate(cand, order=0)[0]
            if np.isfinite(ll_c) and ll_c >= ll - 1e-10 * abs(ll):
                improved = True
                break
            lam *= 0.5
        if not improved:
            break
        theta = cand
        ll, g, H = lik.evaluate(theta, order=2)
    return theta, ll, g, H, it


def _bfgs(lik: GroupLikelihood, theta0: np.ndarray) -> np.ndarray:
    n = lik.data.n

    def obj(th):
        ll, g = lik.evaluate(th, order=1)
        if not np.isfinite(ll):
            return np.inf, np.zeros_like(th)
        return -ll / n, -g / n

    res = optimize.minimize(obj, theta0, jac=True, method="BFGS",
                            options={"gtol": 1e-9, "maxiter": 2000})
    return res.x


def fit_mle(data: StudyData, t: int, init: np.ndarray | SampleModelFit | None = None,
            nodes: int = DEFAULT_NODES, weighted: bool = False,
            compute_covariance: bool = True) -> SampleModelFit:
    """Maximize the group-``t`` full likelihood.

    Without ``init`` three starts are tried (delta = 0, +0.5, -0.5) with
    BFGS followed by Newton polishing, and the best optimum is kept.  With
    ``init`` (a packed vector or a previous fit) a single Newton run is
    made from it.  The covariance is the inverse observed information,
    reported for the natural parameters (sigma, not log sigma).
    """
    data.require_exclusion_restriction()
    lik = GroupLikelihood(data, t, nodes, weighted)
    if init is None:
        starts = default_starts(data, t, weighted)
        use_bfgs = True
    else:
        starts = [init.packed() if isinstance(init, SampleModelFit) else np.asarray(init, dtype=float)]
        use_bfgs = False
    best = None
    start_ll = []
    for th0 in starts:
        start_ll.append(lik.loglik(th0))
        try:
            th = _bfgs(lik, th0) if use_bfgs else th0
            th, ll, g, H, it = _newton(lik, th)
        except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            log.debug("start failed: %s", exc)
            continue
        if not np.isfinite(ll):
            continue
        if best is None or ll > best[1]:
            best = (th, ll, g, H, it)
    if best is None:
        raise SampleModelError(f"maximization failed from all starts (group {t})")
    th, ll, g, H, it = best
    gnorm = float(np.max(np.abs(g)))
    converged = gnorm < GRAD_TOL
    if not converged:
        warnings.warn(f"group {t} fit stopped with gradient norm {gnorm:.2e}", RuntimeWarning, stacklevel=2)
    cov = None
    hess_ok = True
    if compute_covariance:
        cov, hess_ok = _natural_covariance(lik, th, H)
    pop, assign = lik.unpack(th)
    return SampleModelFit(t, pop, assign, cov, _natural_names(lik), data.x_names, data.v_names,
                          float(ll), nodes, converged, gnorm, weighted, it, start_ll, hess_ok)


def _natural_covariance(lik: GroupLikelihood, theta: np.ndarray, H: np.ndarray):
    try:
        np.linalg.cholesky(-H)
    except np.linalg.LinAlgError:
        warnings.warn("observed information is not positive definite; covariance omitted",
                      RuntimeWarning, stacklevel=3)
        return None, False
    cov = np.linalg.inv(-H)
    J = np.ones(lik.npar)
    J[lik.isg] = math.exp(theta[lik.isg])
    cov = cov * J[:, None] * J[None, :]
    return 0.5 * (cov + cov.T), True


def numeric_hessian(lik: GroupLikelihood, theta: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central differences of the analytic score."""
    k = theta.size
    H = np.empty((k, k))
    for j in range(k):
        h = rel_step * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        H[:, j] = (lik.evaluate(tp)[1] - lik.evaluate(tm)[1]) / (2 * h)
    return 0.5 * (H + H.T)


# population means ------------------------------------------------------------

def _mean_at(fit: SampleModelFit, xbar: np.ndarray) -> tuple[float, float]:
    xbar = np.asarray(xbar, dtype=float)
    est = fit.pop.beta0 + float(xbar @ fit.pop.beta)
    if fit.covariance is None:
        return est, math.nan
    grad = np.zeros(fit.vector.size)
    grad[0] = 1.0
    grad[1:1 + xbar.size] = xbar
    return est, math.sqrt(max(float(grad @ fit.covariance @ grad), 0.0))


def mean_pop(fit: SampleModelFit, xbar) -> tuple[float, float]:
    """Model mean at known population covariate means, with delta-method SE."""
    if isinstance(xbar, dict):
        xbar = [xbar[nm] for nm in fit.x_names]
    return _mean_at(fit, xbar)


def mean_sample(fit: SampleModelFit, data: StudyData, weighted: bool = False) -> tuple[float, float]:
    """Average fitted population mean over every sampled unit (both groups)."""
    X = data.matrix(fit.x_names)
    w = _unit_weights(data, weighted)
    return _mean_at(fit, w @ X / w.sum())


def _combined_point(fit: SampleModelFit, data: StudyData, weighted: bool,
                    mean_data: StudyData | None = None) -> tuple[float, int]:
    """Point value of the combined estimator and the count of tiny probabilities.

    Residuals come from the group members in ``data``; the model part is
    averaged over ``mean_data`` (default ``data``).
    """
    m = data.t == fit.group
    X = data.matrix(fit.x_names)
    V = data.matrix(fit.v_names)
    w = _unit_weights(data, weighted)
    ph = assignment_prob(data.y[m], V[m], fit.assign)
    resid = data.y[m] - fit.pop.mean(X[m])
    wm = w[m]
    corr = float(np.sum(wm * resid / ph) / np.sum(wm / ph))
    md = data if mean_data is None else mean_data
    wmd = _unit_weights(md, weighted)
    mu_s = fit.pop.beta0 + float((wmd @ md.matrix(fit.x_names) / wmd.sum()) @ fit.pop.beta)
    return corr + mu_s, int(np.sum(ph < 1e-6))


def mean_combined(fit: SampleModelFit, data: StudyData, weighted: bool = False,
                  n_boot: int = 200, seed: int = 0,
                  mean_data: StudyData | None = None) -> tuple[float, float]:
    """Model mean plus an inverse-assignment-probability weighted residual correction.

    The SE is a nonparametric bootstrap over the units of ``data`` with each
    replicate refitted from ``fit``; ``n_boot=0`` skips it.
    """
    est, small = _combined_point(fit, data, weighted, mean_data)
    if small:
        warnings.warn(f"{small} fitted assignment probabilities are below 1e-6", RuntimeWarning,
                      stacklevel=2)
    if not n_boot:
        return est, math.nan
    rng = np.random.default_rng(seed)
    reps = []
    for _ in range(n_boot):
        bd = data.subset(rng.integers(0, data.n, data.n))
        try:
            bf = _refit(bd, fit, weighted)
        except _REFIT_ERRORS:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            reps.append(_combined_point(bf, bd, weighted)[0])
    return est, float(np.std(reps, ddof=1)) if len(reps) > 1 else math.nan


_REFIT_ERRORS = (SampleModelError, ValidationError, np.linalg.LinAlgError, OverflowError)


def _refit(data: StudyData, fit: SampleModelFit, weighted: bool) -> SampleModelFit:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fit_mle(data, fit.group, init=fit, nodes=fit.quadrature, weighted=weighted,
                       compute_covariance=False)


@dataclass
class SampleModelAte:
    fits: tuple[SampleModelFit, SampleModelFit]
    regression: object
    combined: object


def ate_sample_model(data: StudyData, pools: dict[int, StudyData] | None = None,
                     weighted: bool = False, nodes: int = DEFAULT_NODES, n_boot: int = 200,
                     seed: int = 0,
                     fits: tuple[SampleModelFit, SampleModelFit] | None = None) -> SampleModelAte:
    """Fit both groups and report the regression-form and combined ATE estimates.

    ``data`` is the analysed sample; covariate means are taken over it.
    ``pools[t]`` is the group-``t`` likelihood data when it differs from
    ``data`` (simulated per-group selection).  With a single data set the
    combined-estimator SE comes from a joint bootstrap of units; with pools
    each group is bootstrapped separately and the variances added.
    """
    from .reports import AteReport

    pl = {0: data, 1: data} if pools is None else pools
    if fits is None:
        f1 = fit_mle(pl[1], 1, nodes=nodes, weighted=weighted)
        f0 = fit_mle(pl[0], 0, nodes=nodes, weighted=weighted)
    else:
        f1, f0 = fits
    m1s, s1 = mean_sample(f1, data, weighted)
    m0s, s0 = mean_sample(f0, data, weighted)
    reg = AteReport("SampleMLE-S", m1s, m0s, math.sqrt(s1**2 + s0**2), weighted,
                    {"se_mu1": s1, "se_mu0": s0, "converged": [f1.converged, f0.converged]})

    m1c, small1 = _combined_point(f1, pl[1], weighted, data)
    m0c, small0 = _combined_point(f0, pl[0], weighted, data)
    if small1 + small0:
        warnings.warn(f"{small1 + small0} fitted assignment probabilities are below 1e-6",
                      RuntimeWarning, stacklevel=2)
    se_c = se1c = se0c = math.nan
    if n_boot:
        rng = np.random.default_rng(seed)
        if pools is None:
            r1, r0 = [], []
            for _ in range(n_boot):
                bd = data.subset(rng.integers(0, data.n, data.n))
                try:
                    b1 = _refit(bd, f1, weighted)
                    b0 = _refit(bd, f0, weighted)
                except _REFIT_ERRORS:
                    continue
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    r1.append(_combined_point(b1, bd, weighted)[0])
                    r0.append(_combined_point(b0, bd, weighted)[0])
            r1, r0 = np.array(r1), np.array(r0)
            se_c = float(np.std(r1 - r0, ddof=1))
            se1c, se0c = float(np.std(r1, ddof=1)), float(np.std(r0, ddof=1))
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                _, se1c = mean_combined(f1, pl[1], weighted, n_boot, seed)
                _, se0c = mean_combined(f0, pl[0], weighted, n_boot, seed + 1)
            se_c = math.sqrt(se1c**2 + se0c**2)
    comb = AteReport("SampleMLE-C", m1c, m0c, se_c, weighted, {"se_mu1": se1c, "se_mu0": se0c})
    return SampleModelAte((f1, f0), reg, comb)
