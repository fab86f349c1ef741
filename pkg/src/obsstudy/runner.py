"""Config-driven pipelines behind the command-line interface.

A run reads one JSON config, executes a pipeline (``estimate``, ``gof``,
``simulate``, ``power`` or ``compare``) and writes its outputs plus a
``manifest.json`` into the output directory.  Outputs depend only on the
config and seed, never on the worker count.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import __version__
from .dataset import CsvSchema, StudyData, load_csv, standardize
from .gof import bootstrap_group, write_replicate_csv
from .parallel import pmap
from .reports import CLASSICAL_METHODS, METHODS, AteReport, dumps
from .sample_model import ate_sample_model
from .selection import ate_heckman_lv, ate_iv
from .si_estimators import (ate_brewer_hajek, ate_difference, ate_doubly_robust, ate_matching,
                            ate_regression, fit_propensity)
from .sim import (CSV_COLUMNS, DISTRIBUTIONS, PowerRow, generate_study, ireland_spec, power_study,
                  write_power_csv)

COMMANDS = ("estimate", "gof", "simulate", "power", "compare")
PRESETS = ("ireland",)
PRESET_INSTRUMENT = "S.loc"  # assignment-only covariate of the Ireland preset


class ConfigError(ValueError):
    """The configuration is invalid; raised before any computation."""


class RunError(RuntimeError):
    def __init__(self, module: str, message: str):
        super().__init__(f"[{module}] {message}")
        self.module = module
        self.detail = message


_KNOWN_KEYS = {
    "seed", "output_dir", "data", "synthetic", "x_names", "v_names", "instrument",
    "si_covariates", "estimators", "weighted", "matching_m", "quadrature_nodes", "bootstrap_B",
    "se_bootstrap", "link", "simulation", "gof", "threads",
}


@dataclass
class RunConfig:
    seed: int
    output_dir: str = "out"
    data: dict | None = None
    synthetic: dict | None = None
    x_names: list[str] | None = None
    v_names: list[str] | None = None
    instrument: str | None = None
    si_covariates: list[str] | None = None
    estimators: list[str] = field(default_factory=lambda: list(METHODS))
    weighted: bool = False
    matching_m: int = 4
    quadrature_nodes: int = 40
    bootstrap_B: int = 250
    se_bootstrap: int = 200
    link: str = "logit"
    simulation: dict = field(default_factory=dict)
    gof: dict = field(default_factory=dict)
    threads: int | None = None

    @classmethod
    def from_mapping(cls, m: Mapping[str, Any]) -> "RunConfig":
        unknown = set(m) - _KNOWN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in m or not isinstance(m["seed"], int) or isinstance(m["seed"], bool):
            raise ConfigError("an integer 'seed' is required")
        cfg = cls(**{k: m[k] for k in m})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_mapping(raw)

    def validate(self) -> None:
        bad = [e for e in self.estimators if e not in METHODS]
        if bad:
            raise ConfigError(f"unknown estimators {bad}; choose from {list(METHODS)}")
        if (self.data is None) == (self.synthetic is None):
            raise ConfigError("give exactly one of 'data' or 'synthetic'")
        if self.data is not None:
            if "path" not in self.data or "schema" not in self.data:
                raise ConfigError("'data' needs 'path' and 'schema'")
            try:
                CsvSchema.from_mapping(self.data["schema"])
            except KeyError as exc:
                raise ConfigError(f"schema lacks {exc}") from None
        if self.synthetic is not None:
            if self.synthetic.get("preset", "ireland") not in PRESETS:
                raise ConfigError(f"unknown synthetic preset; choose from {list(PRESETS)}")
            if self.instrument is None:
                self.instrument = PRESET_INSTRUMENT
            res = self.synthetic.get("residual", "normal")
            if res not in DISTRIBUTIONS:
                raise ConfigError(f"unknown residual {res!r}; choose from {list(DISTRIBUTIONS)}")
        if "IV" in self.estimators and not self.instrument:
            raise ConfigError("the IV estimator needs 'instrument'")
        if self.link not in ("logit", "probit"):
            raise ConfigError("link must be 'logit' or 'probit'")
        if self.matching_m < 1:
            raise ConfigError("matching_m must be at least 1")
        if self.quadrature_nodes < 10:
            raise ConfigError("quadrature_nodes must be at least 10")
        if self.bootstrap_B < 50:
            raise ConfigError("bootstrap_B must be at least 50")
        if self.se_bootstrap < 0:
            raise ConfigError("se_bootstrap must be non-negative")
        for d in self.simulation.get("distributions", []):
            if d not in DISTRIBUTIONS:
                raise ConfigError(f"unknown distribution {d!r}")

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("threads")
        return d


@dataclass
class LoadedData:
    data: StudyData
    pools: dict[int, StudyData] | None = None
    truth: dict | None = None


def load_data(cfg: RunConfig, replicate: int = 0) -> LoadedData:
    if cfg.data is not None:
        schema = CsvSchema.from_mapping(cfg.data["schema"])
        data = load_csv(cfg.data["path"], schema)
        std = cfg.data.get("standardize", False)
        if std:
            data = standardize(data, None if std is True else std)
    else:
        syn = cfg.synthetic
        spec = ireland_spec(seed=cfg.seed, residual=syn.get("residual", "normal"),
                            n_population=syn.get("n_population", 1938))
        study = generate_study(spec, syn.get("replicate", replicate))
        data, pools, truth = study.data, study.pools, study.truth
        if cfg.x_names or cfg.v_names:
            raise ConfigError("x_names/v_names cannot be overridden for synthetic presets")
        return LoadedData(data, pools, truth)
    if cfg.x_names or cfg.v_names:
        data = data.with_roles(cfg.x_names or data.x_names, cfg.v_names or data.v_names)
    missing = [nm for nm in (cfg.si_covariates or []) + ([cfg.instrument] if cfg.instrument else [])
               if nm not in data.names]
    if missing:
        raise ConfigError(f"columns not in the data: {missing}")
    return LoadedData(data)


def run_estimators(cfg: RunConfig, ld: LoadedData, weighted: bool,
                   with_se: bool = True) -> list[AteReport]:
    """Selected estimators in canonical order."""
    data = ld.data
    names = cfg.si_covariates
    nb = cfg.se_bootstrap if with_se else 0
    out: list[AteReport] = []
    prop = None
    needs_prop = {"BH", "DR"} & set(cfg.estimators)
    if needs_prop:
        prop = _guard("si_estimators", fit_propensity, data, names, cfg.link, weighted)
    sm = None
    for method in METHODS:
        if method not in cfg.estimators:
            continue
        if method == "Diff":
            rep = _guard("si_estimators", ate_difference, data, weighted)
        elif method == "OLS":
            rep = _guard("si_estimators", ate_regression, data, weighted, names)
        elif method == "Match":
            rep = _guard("si_estimators", ate_matching, data, cfg.matching_m, weighted, names,
                         nb, cfg.seed)
        elif method == "BH":
            rep = _guard("si_estimators", ate_brewer_hajek, data, prop, weighted, cfg.link)
        elif method == "DR":
            rep = _guard("si_estimators", ate_doubly_robust, data, prop, weighted, cfg.link, names)
        elif method == "LV":
            rep = _guard("selection_estimators", ate_heckman_lv, data, weighted)
        elif method == "IV":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rep = _guard("selection_estimators", ate_iv, data, cfg.instrument, weighted, cfg.link)
        else:
            if sm is None:
                sm = _guard("sample_model", ate_sample_model, data, ld.pools, weighted,
                            cfg.quadrature_nodes, nb, cfg.seed + 1)
            rep = sm.regression if method == "SampleMLE-S" else sm.combined
        out.append(rep)
    return out


def _guard(module: str, func, *args):
    try:
        return func(*args)
    except (ConfigError, RunError):
        raise
    except Exception as exc:  # noqa: BLE001 - surfaced with module context
        raise RunError(module, f"{type(exc).__name__}: {exc}") from exc


def compare_weighted(cfg: RunConfig, ld: LoadedData | None = None) -> list[dict]:
    """Unweighted and weighted results side by side for every selected method."""
    ld = ld or load_data(cfg)
    un = run_estimators(cfg, ld, weighted=False)
    we = run_estimators(cfg, ld, weighted=True)
    rows = []
    for a, b in zip(un, we):
        rows.append({"method": a.method,
                     **{k: {"UNWEI": getattr(a, k), "WEI": getattr(b, k)}
                        for k in ("mu1", "mu0", "tau", "se")}})
    return rows


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def _simulate_replicate(r: int, cfg: RunConfig, dist: str) -> dict:
    c = RunConfig(**{**asdict(cfg), "synthetic": {"preset": "ireland", "residual": dist,
                                                  "replicate": r},
                     "data": None})
    ld = load_data(c, r)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        reps = run_estimators(c, ld, weighted=False, with_se=False)
    return {"truth": ld.truth, "tau": {rep.method: rep.tau for rep in reps}}


def simulate_table(cfg: RunConfig) -> list[PowerRow]:
    sim = cfg.simulation
    rows = []
    for dist in sim.get("distributions", ["normal"]):
        res = pmap(partial(_simulate_replicate, cfg=cfg, dist=dist),
                   range(int(sim.get("replicates", 100))), cfg.threads)
        for method in [m for m in METHODS if m in cfg.estimators]:
            vals = np.array([r["tau"][method] for r in res])
            rows.append(PowerRow(dist, "", None, None, method, float(vals.mean()),
                                 float(vals.std(ddof=1)) if vals.size > 1 else None))
        rows.append(PowerRow(dist, "", None, None, "truth", float(res[0]["truth"]["tau"]), 0.0))
    return rows


def run(cfg: RunConfig, command: str, out_dir: str | Path | None = None) -> dict:
    """Execute ``command`` and write outputs; returns the manifest."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "version": __version__, "seed": cfg.seed,
                "config": cfg.echo(), "outputs": [], "complete": False, "error": None}
    try:
        if command == "estimate":
            ld = load_data(cfg)
            reps = run_estimators(cfg, ld, cfg.weighted)
            _write(out / "estimates.json", dumps([r.to_dict() for r in reps]))
            manifest["outputs"].append("estimates.json")
        elif command == "compare":
            _write(out / "compare.json", dumps(compare_weighted(cfg)))
            manifest["outputs"].append("compare.json")
        elif command == "gof":
            ld = load_data(cfg)
            pools = ld.pools or {1: ld.data, 0: ld.data}
            sm = _guard("sample_model", ate_sample_model, ld.data, ld.pools, cfg.weighted,
                        cfg.quadrature_nodes, 0, cfg.seed + 1)
            reports = []
            for fit in sm.fits:
                reports.append(_guard("gof_suite", bootstrap_group, pools[fit.group], fit,
                                      cfg.bootstrap_B, cfg.seed + 2, cfg.threads))
            payload = {"fits": [f.to_dict() for f in sm.fits],
                       "reports": [r.to_dict() for r in reports]}
            _write(out / "gof.json", dumps(payload))
            manifest["outputs"].append("gof.json")
            if cfg.gof.get("replicate_csv"):
                write_replicate_csv(reports, out / "gof_replicates.csv")
                manifest["outputs"].append("gof_replicates.csv")
        elif command == "simulate":
            rows = simulate_table(cfg)
            write_power_csv(rows, out / "simulation.csv")
            manifest["outputs"].append("simulation.csv")
        elif command == "power":
            sim = cfg.simulation
            rows, summary = _guard("sim_engine", power_study,
                                   tuple(sim.get("distributions", ("A", "B", "C"))),
                                   int(sim.get("replicates", 100)), int(sim.get("B", 99)),
                                   cfg.seed, tuple(sim.get("levels", (0.10, 0.05, 0.025, 0.01))),
                                   tuple(sim.get("groups", (1, 0))), cfg.quadrature_nodes,
                                   cfg.threads)
            write_power_csv(rows, out / "power.csv")
            manifest["outputs"].append("power.csv")
            manifest["fit_failures"] = {d: s["failures"] for d, s in summary.items()}
        manifest["complete"] = True
    except RunError as exc:
        manifest["error"] = {"module": exc.module, "message": exc.detail}
        raise
    except ConfigError as exc:
        manifest["error"] = {"module": "cli_runner", "message": str(exc)}
        raise
    finally:
        _write(out / "manifest.json", dumps(manifest))
    return manifest


__all__ = ["COMMANDS", "CSV_COLUMNS", "ConfigError", "RunConfig", "RunError", "compare_weighted",
           "load_data", "run", "run_estimators", "simulate_table", "CLASSICAL_METHODS"]

