"""Simulation: data under the normal/logistic working model and skew-t misspecification.

Two assignment schemes are offered.

``per_group``
    Each group draws responses for every unit of the population pool from
    its own population model and selects members with its own logistic
    rule, so group sizes vary independently.  This is the recipe used to
    bootstrap the fitted model.  A unit may enter both groups or neither;
    the combined data set stacks the two member sets.
``complement``
    Both potential outcomes are drawn, the group-1 rule (evaluated at
    ``Y_1``) assigns the unit and everyone else joins group 0.  Coherent
    with the group-0 model only when both deltas are zero and the group-0
    coefficients are the negated group-1 ones.
"""

from __future__ import annotations

import csv
import warnings
import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .dataset import StudyData, from_arrays
from .parallel import pmap
from .gof import bootstrap_group
from .sample_model import (AssignmentParams, PopulationParams, SampleModelError, _combined_point,
                           fit_mle, mean_sample)

GOF_LEVELS = (0.10, 0.05, 0.025, 0.01)


# skew-t residuals --------------------------------------------------------------

@dataclass(frozen=True)
class SkewT:
    """Skew-t with location ``xi``, scale ``w``, shape ``alpha`` and ``nu`` degrees of freedom."""

    xi: float = 0.0
    w: float = 1.0
    alpha: float = 0.0
    nu: float = math.inf

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError("skew-t scale w must be positive")
        if not self.nu > 0:
            raise ValueError("skew-t degrees of freedom must be positive (or inf)")

    @property
    def _delta(self) -> float:
        return self.alpha / math.sqrt(1.0 + self.alpha**2)

    def _b(self) -> float:
        if math.isinf(self.nu):
            return math.sqrt(2.0 / math.pi)
        if self.nu <= 1:
            return math.nan
        return math.sqrt(self.nu / math.pi) * math.exp(
            math.lgamma((self.nu - 1) / 2) - math.lgamma(self.nu / 2))

    def mean(self) -> float:
        return self.xi + self.w * self._delta * self._b()

    def sd(self) -> float:
        m2 = 1.0 if math.isinf(self.nu) else (self.nu / (self.nu - 2) if self.nu > 2 else math.inf)
        return self.w * math.sqrt(m2 - (self._delta * self._b()) ** 2)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        d = self._delta
        u0 = rng.standard_normal(n)
        u1 = rng.standard_normal(n)
        z = d * np.abs(u0) + math.sqrt(1.0 - d * d) * u1
        if not math.isinf(self.nu):
            z = z / np.sqrt(rng.chisquare(self.nu, n) / self.nu)
        return self.xi + self.w * z


def skew_t_sample(xi: float, w: float, alpha: float, nu: float, n: int,
                  seed: int | np.random.Generator = 0) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return SkewT(xi, w, alpha, nu).sample(n, rng)


DISTRIBUTIONS: dict[str, SkewT] = {
    "normal": SkewT(),
    "A": SkewT(0.0, 1.0, 0.0, 6.0),
    "B": SkewT(-1.16, 1.55, 2.5, math.inf),
    "C": SkewT(-1.24, 1.45, 2.5, 6.0),
}


# covariate sources ------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticCovariates:
    """Independent columns: ``("normal", sd)`` or ``("bernoulli", p)``."""

    columns: Mapping[str, tuple[str, float]]

    def __post_init__(self):
        for name, (kind, par) in self.columns.items():
            if kind not in ("normal", "bernoulli"):
                raise ValueError(f"unknown covariate kind {kind!r} for {name!r}")
            if kind == "bernoulli" and not 0 < par < 1:
                raise ValueError(f"bernoulli probability for {name!r} must lie in (0, 1)")
            if kind == "normal" and not par > 0:
                raise ValueError(f"normal sd for {name!r} must be positive")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.columns)

    def means(self) -> dict[str, float]:
        return {nm: (par if kind == "bernoulli" else 0.0) for nm, (kind, par) in self.columns.items()}

    def draw(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        out = {}
        for nm, (kind, par) in self.columns.items():
            out[nm] = (rng.random(n) < par).astype(float) if kind == "bernoulli" else par * rng.standard_normal(n)
        return out


@dataclass(frozen=True)
class ResampledCovariates:
    """Rows drawn with replacement from an existing data set."""

    data: StudyData

    @property
    def names(self) -> tuple[str, ...]:
        return self.data.names

    def means(self) -> dict[str, float]:
        return {nm: float(self.data.column(nm).mean()) for nm in self.names}

    def draw(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        idx = rng.integers(0, self.data.n, n)
        return {nm: self.data.column(nm)[idx] for nm in self.names}


IRELAND_X = ("GEN", "ME", "SEI", "HER", "SES")
IRELAND_V = ("GEN", "SEI", "HER", "SES", "S.loc")
IRELAND_POOL = 1938

# Standardized continuous covariates; the HER spread is chosen so that the
# fitted assignment rules reproduce the reported group sizes (about 1245 and 700).
IRELAND_COVARIATES = SyntheticCovariates({
    "GEN": ("bernoulli", 0.53),
    "ME": ("bernoulli", 0.61),
    "SEI": ("normal", 1.0),
    "HER": ("normal", 0.5),
    "SES": ("normal", 1.0),
    "S.loc": ("bernoulli", 0.40),
})


def published_params() -> dict[int, tuple[PopulationParams, AssignmentParams]]:
    """Published private (1) and public (0) school fits, in membership form."""
    return {
        1: (PopulationParams(6.09, [-0.20, 0.18, 0.16, 0.39, 0.21], 0.83),
            AssignmentParams(-2.95, 0.49, [0.77, -0.12, 3.16, 0.09, 1.13])),
        0: (PopulationParams(6.89, [0.17, 0.11, 0.16, 1.35, 0.30], 1.10),
            AssignmentParams(13.88, -2.02, [-0.76, 0.40, -2.57, 0.27, -1.63])),
    }


PUBLISHED_SE = {
    1: [0.07, 0.05, 0.05, 0.03, 0.09, 0.02, 0.02, 1.30, 0.21, 0.13, 0.07, 0.20, 0.07, 0.13],
    0: [0.14, 0.08, 0.07, 0.04, 0.20, 0.04, 0.07, 2.90, 0.39, 0.18, 0.12, 0.30, 0.11, 0.24],
}


# generator ----------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorSpec:
    covariates: SyntheticCovariates | ResampledCovariates
    x_names: tuple[str, ...]
    v_names: tuple[str, ...]
    pop: Mapping[int, PopulationParams]
    assign: Mapping[int, AssignmentParams]
    residual: SkewT | None = None
    residual_scaled: bool = False
    n_population: int = IRELAND_POOL
    mode: str = "per_group"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("per_group", "complement"):
            raise ValueError(f"unknown assignment mode {self.mode!r}")
        if set(self.pop) != {0, 1} or set(self.assign) != {0, 1}:
            raise ValueError("pop and assign need entries for groups 0 and 1")
        missing = set(self.x_names) | set(self.v_names)
        missing -= set(self.covariates.names)
        if missing:
            raise ValueError(f"covariate source lacks {sorted(missing)}")
        for t in (0, 1):
            if self.pop[t].beta.size != len(self.x_names):
                raise ValueError(f"group {t} population model needs {len(self.x_names)} slopes")
            if self.assign[t].gamma.size != len(self.v_names):
                raise ValueError(f"group {t} assignment model needs {len(self.v_names)} slopes")
        if self.n_population < 10:
            raise ValueError("n_population too small")

    def residual_mean(self, t: int) -> float:
        if self.residual is None:
            return 0.0
        return self.residual.mean() * (self.pop[t].sigma if self.residual_scaled else 1.0)

    def true_means(self) -> dict[str, float]:
        """Superpopulation means of both potential outcomes and their difference."""
        m = self.covariates.means()
        xbar = np.array([m[nm] for nm in self.x_names])
        mu = {t: float(self.pop[t].beta0 + xbar @ self.pop[t].beta) + self.residual_mean(t)
              for t in (0, 1)}
        return {"mu1": mu[1], "mu0": mu[0], "tau": mu[1] - mu[0]}


def ireland_spec(seed: int = 0, residual: SkewT | str | None = None, mode: str = "per_group",
                 covariates=None, n_population: int = IRELAND_POOL,
                 residual_scaled: bool = False) -> GeneratorSpec:
    """Generator with the published fits and Ireland-like synthetic covariates."""
    if isinstance(residual, str):
        residual = None if residual == "normal" else DISTRIBUTIONS[residual]
    p = published_params()
    return GeneratorSpec(covariates or IRELAND_COVARIATES, IRELAND_X, IRELAND_V,
                         {t: p[t][0] for t in p}, {t: p[t][1] for t in p}, residual,
                         residual_scaled, n_population, mode, seed)


def ignorable_spec(seed: int = 0, n_population: int = 2000) -> GeneratorSpec:
    """delta = 0 for both groups, complement mode, group-0 rule = negated group-1 rule.

    ``s`` enters only the assignment model and serves as the instrument.
    """
    cov = SyntheticCovariates({"x1": ("normal", 1.0), "x2": ("normal", 1.0), "b": ("bernoulli", 0.5),
                               "s": ("normal", 1.0)})
    a1 = AssignmentParams(0.2, 0.0, [0.6, 0.5, 0.8])
    a0 = AssignmentParams(-0.2, 0.0, [-0.6, -0.5, -0.8])
    return GeneratorSpec(cov, ("x1", "x2", "b"), ("x1", "b", "s"),
                         {1: PopulationParams(1.0, [0.5, 0.3, 0.4], 0.8),
                          0: PopulationParams(0.5, [0.4, 0.5, -0.2], 1.0)},
                         {1: a1, 0: a0}, None, False, n_population, "complement", seed)


@dataclass
class SimulatedStudy:
    """One simulated data set.

    ``data`` is what an analyst sees (the union of both groups' members).
    ``pools[t]`` holds every offered unit with ``t`` marking members of
    group ``t``; this is the data for the group-``t`` likelihood.  In
    complement mode both pools are ``data``.
    """

    data: StudyData
    pools: dict[int, StudyData]
    truth: dict[str, float]
    potential: dict[int, np.ndarray] = field(repr=False, default_factory=dict)
    offered: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def _residuals(spec: GeneratorSpec, t: int, n: int, rng: np.random.Generator) -> np.ndarray:
    sig = spec.pop[t].sigma
    if spec.residual is None:
        return sig * rng.standard_normal(n)
    e = spec.residual.sample(n, rng)
    return sig * e if spec.residual_scaled else e


def generate_study(spec: GeneratorSpec, replicate: int = 0) -> SimulatedStudy:
    """Draw one data set; bit-reproducible given ``(spec.seed, replicate)``.

    Independent streams (covariates, group 1, group 0) are keyed by
    ``(seed, replicate, stream)``.
    """
    n = spec.n_population
    cov = spec.covariates.draw(n, np.random.default_rng([spec.seed, replicate, 0]))
    X = np.column_stack([cov[nm] for nm in spec.x_names])
    V = np.column_stack([cov[nm] for nm in spec.v_names])
    ys, members = {}, {}
    for t in (1, 0):
        rng = np.random.default_rng([spec.seed, replicate, 2 - t])
        ys[t] = spec.pop[t].mean(X) + _residuals(spec, t, n, rng)
        members[t] = rng.random(n) < special.expit(spec.assign[t].index(ys[t], V))
    names = tuple(dict.fromkeys((*spec.x_names, *spec.v_names)))
    covs = {nm: cov[nm] for nm in names}
    truth = spec.true_means()
    if spec.mode == "complement":
        t = members[1].astype(int)
        y = np.where(t == 1, ys[1], ys[0])
        data = _make(y, t, covs, spec)
        return SimulatedStudy(data, {1: data, 0: data}, truth, ys, cov)
    pools = {}
    for g in (1, 0):
        pools[g] = _make(ys[g], np.where(members[g], g, 1 - g), covs, spec)
    i1, i0 = np.flatnonzero(members[1]), np.flatnonzero(members[0])
    idx = np.r_[i1, i0]
    data = _make(np.r_[ys[1][i1], ys[0][i0]], np.r_[np.ones(i1.size, int), np.zeros(i0.size, int)],
                 {nm: c[idx] for nm, c in covs.items()}, spec)
    return SimulatedStudy(data, pools, truth, ys, cov)


def _make(y, t, covs, spec: GeneratorSpec) -> StudyData:
    return from_arrays(y, t, covs, spec.x_names, spec.v_names)


# power study --------------------------------------------------------------------

@dataclass
class PowerRow:
    distribution: str
    statistic: str
    level: float | None
    rejection_rate: float | None
    estimator: str
    mean: float | None
    se: float | None

    def cells(self) -> list[str]:
        def fmt(v):
            return "" if v is None else (repr(float(v)) if isinstance(v, float) else str(v))
        return [self.distribution, self.statistic, fmt(self.level), fmt(self.rejection_rate),
                self.estimator, fmt(self.mean), fmt(self.se)]


CSV_COLUMNS = ("distribution", "statistic", "level", "rejection_rate", "estimator", "mean", "se")


def _power_replicate(r: int, spec: GeneratorSpec, B: int, nodes: int, groups: Sequence[int]):
    study = generate_study(spec, r)
    out = {"pvalues": {}, "estimates": {}, "failed": False}
    fits = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            for g in (1, 0):
                fits[g] = fit_mle(study.pools[g], g, nodes=nodes, compute_covariance=False)
        except (SampleModelError, np.linalg.LinAlgError, ValueError):
            out["failed"] = True
            return out
        for g in (1, 0):
            out["estimates"][f"mu{g}_S"] = mean_sample(fits[g], study.data)[0]
            out["estimates"][f"mu{g}_C"] = _combined_point(fits[g], study.pools[g], False, study.data)[0]
        for g in groups:
            if B:
                rep = bootstrap_group(study.pools[g], fits[g], B, seed=spec.seed * 100003 + r, threads=1)
                out["pvalues"][g] = (rep.p_ks, rep.p_cm, rep.p_ad)
    e = out["estimates"]
    e["tau_S"] = e["mu1_S"] - e["mu0_S"]
    e["tau_C"] = e["mu1_C"] - e["mu0_C"]
    return out


def power_study(distributions: Sequence[str] = ("A", "B", "C"), replicates: int = 100, B: int = 99,
                seed: int = 0, levels: Sequence[float] = GOF_LEVELS, groups: Sequence[int] = (1, 0),
                nodes: int = 40, threads: int | None = 1, spec_factory=ireland_spec,
                ) -> tuple[list[PowerRow], dict]:
    """Rejection rates of the three statistics and estimator summaries per distribution.

    Returns the table rows and a summary dict with fit-failure counts and
    the raw p-values.  Statistics are labelled ``KS``, ``CM``, ``AD`` with
    a ``group1:`` / ``group0:`` prefix.
    """
    rows: list[PowerRow] = []
    summary = {}
    for k, dist in enumerate(distributions):
        spec = spec_factory(seed=seed + 7919 * k, residual=dist)
        res = pmap(partial(_power_replicate, spec=spec, B=B, nodes=nodes, groups=tuple(groups)),
                   range(replicates), threads)
        ok = [r for r in res if not r["failed"]]
        summary[dist] = {"failures": len(res) - len(ok), "truth": spec.true_means(),
                         "pvalues": {g: [r["pvalues"][g] for r in ok] for g in groups}}
        for g in groups:
            pv = np.array(summary[dist]["pvalues"][g])
            if pv.size == 0:
                continue
            for j, stat in enumerate(("KS", "CM", "AD")):
                for lev in levels:
                    rows.append(PowerRow(dist, f"group{g}:{stat}", float(lev),
                                         float(np.mean(pv[:, j] <= lev)), "", None, None))
        for est in ("mu1_S", "mu0_S", "mu1_C", "mu0_C", "tau_S", "tau_C"):
            vals = np.array([r["estimates"][est] for r in ok])
            if vals.size:
                rows.append(PowerRow(dist, "", None, None, est, float(vals.mean()),
                                     float(vals.std(ddof=1)) if vals.size > 1 else None))
    return rows, summary


def write_power_csv(rows: Sequence[PowerRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for r in rows:
            wr.writerow(r.cells())
