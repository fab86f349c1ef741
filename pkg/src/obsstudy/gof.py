"""Goodness of fit of the sample model via probability integral transforms.

Each group member's response is mapped through the fitted sample cdf; under
a correct model the values are uniform.  Kolmogorov-Smirnov, Cramer-von
Mises and Anderson-Darling statistics summarize the departure, and
p-values come from a parametric bootstrap that regenerates responses and
group membership from the fitted model and refits it.
"""

from __future__ import annotations

import csv
from functools import partial
from pathlib import Path

import numpy as np
from scipy import special

from .dataset import StudyData, ValidationError
from .parallel import pmap
from .reports import GofReport
from .sample_model import SampleModelError, SampleModelFit, fit_mle, sample_cdf

U_EPS = 1e-12
MAX_FAILURE_SHARE = 0.10


class GofError(RuntimeError):
    pass


def pit_transform(data: StudyData, t: int, fit: SampleModelFit) -> np.ndarray:
    """Fitted sample-cdf values of the responses of group ``t`` members,
    clamped to ``(1e-12, 1 - 1e-12)``."""
    if not fit.converged:
        raise GofError("the fit did not converge; refusing to compute PIT values")
    m = data.t == t
    u = sample_cdf(data.y[m], data.matrix(fit.x_names)[m], data.matrix(fit.v_names)[m],
                   fit.pop, fit.assign)
    if not np.all(np.isfinite(u)):
        raise GofError("quadrature produced non-finite cdf values")
    return np.clip(u, U_EPS, 1.0 - U_EPS)


def _sorted(u) -> np.ndarray:
    u = np.sort(np.asarray(u, dtype=float))
    if u.size == 0:
        raise ValueError("empty u-vector")
    return u


def ks_stat(u) -> float:
    """max_i |i/n - u_(i)|, the empirical cdf taken at the order statistics."""
    u = _sorted(u)
    n = u.size
    return float(np.max(np.abs(np.arange(1, n + 1) / n - u)))


def cm_stat(u) -> float:
    u = _sorted(u)
    n = u.size
    i = np.arange(1, n + 1)
    return float(1.0 / (12 * n) + np.sum((u - (2 * i - 1) / (2 * n)) ** 2))


def ad_stat(u) -> float:
    u = np.clip(_sorted(u), U_EPS, 1.0 - U_EPS)
    n = u.size
    i = np.arange(1, n + 1)
    return float(-n - np.sum((2 * i - 1) * np.log(u) + (2 * n + 1 - 2 * i) * np.log1p(-u)) / n)


def statistics(u) -> tuple[float, float, float]:
    return ks_stat(u), cm_stat(u), ad_stat(u)


def bootstrap_pvalue(observed: float, replicates) -> float:
    """(1 + #{replicate >= observed}) / (B + 1)."""
    r = np.asarray(replicates, dtype=float)
    return float((1 + np.sum(r >= observed)) / (r.size + 1))


def draw_replicate(pool: StudyData, fit: SampleModelFit, rng: np.random.Generator) -> StudyData:
    """New responses from the fitted population model and new membership
    from the fitted assignment rule, at the pool's covariates."""
    X = pool.matrix(fit.x_names)
    V = pool.matrix(fit.v_names)
    y = fit.pop.mean(X) + fit.pop.sigma * rng.standard_normal(pool.n)
    member = rng.random(pool.n) < special.expit(fit.assign.index(y, V))
    t = np.where(member, fit.group, 1 - fit.group)
    return pool.replace(y=y, t=t)


def _one_replicate(b: int, pool: StudyData, fit: SampleModelFit, seed: int):
    rng = np.random.default_rng([seed, fit.group, b])
    rep = draw_replicate(pool, fit, rng)
    size = int(np.sum(rep.t == fit.group))
    try:
        rf = fit_mle(rep, fit.group, init=fit, nodes=fit.quadrature, weighted=False,
                     compute_covariance=False)
        if not rf.converged:
            return None, size
        return statistics(pit_transform(rep, fit.group, rf)), size
    except (SampleModelError, ValidationError, GofError, np.linalg.LinAlgError, ValueError,
            OverflowError):
        return None, size


def bootstrap_group(pool: StudyData, fit: SampleModelFit, B: int = 250, seed: int = 0,
                    threads: int | None = 1) -> GofReport:
    """Observed statistics for group ``fit.group`` and their bootstrap p-values.

    ``pool`` holds every unit offered for assignment to the group, with
    ``t == fit.group`` marking members.  Replicate ``b`` uses the generator
    keyed by ``(seed, group, b)``.
    """
    if B < 50:
        raise ValueError("use at least 50 bootstrap replicates")
    obs = statistics(pit_transform(pool, fit.group, fit))
    out = pmap(partial(_one_replicate, pool=pool, fit=fit, seed=seed), range(B), threads)
    stats = [s for s, _ in out if s is not None]
    sizes = np.array([n for _, n in out], dtype=float)
    failures = B - len(stats)
    if failures > MAX_FAILURE_SHARE * B:
        raise GofError(f"{failures} of {B} bootstrap refits failed for group {fit.group}")
    arr = np.array(stats)
    return GofReport(
        group=fit.group, ks=obs[0], cm=obs[1], ad=obs[2],
        p_ks=bootstrap_pvalue(obs[0], arr[:, 0]),
        p_cm=bootstrap_pvalue(obs[1], arr[:, 1]),
        p_ad=bootstrap_pvalue(obs[2], arr[:, 2]),
        replicates=len(stats), replicate_size_mean=float(sizes.mean()),
        replicate_size_sd=float(sizes.std(ddof=1)), failures=failures,
        replicate_stats=[tuple(map(float, s)) for s in stats],
    )


def bootstrap_pvalues(data: StudyData, fits: tuple[SampleModelFit, SampleModelFit], B: int = 250,
                      seed: int = 0, data0: StudyData | None = None,
                      threads: int | None = 1) -> tuple[GofReport, GofReport]:
    """Reports for (group 1, group 0).  ``data0`` is the group-0 pool when it differs."""
    f1, f0 = fits
    if (f1.group, f0.group) != (1, 0):
        raise ValueError("fits must be ordered (group 1, group 0)")
    r1 = bootstrap_group(data, f1, B, seed, threads)
    r0 = bootstrap_group(data if data0 is None else data0, f0, B, seed, threads)
    return r1, r0


def write_replicate_csv(reports, path: str | Path) -> None:
    """One row per replicate: group, replicate, ks, cm, ad."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["group", "replicate", "ks", "cm", "ad"])
        for rep in reports:
            for b, (ks, cm, ad) in enumerate(rep.replicate_stats):
                wr.writerow([rep.group, b, repr(ks), repr(cm), repr(ad)])
