"""Result records shared by the estimators and the command-line runner."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

METHODS = ("Diff", "OLS", "Match", "BH", "DR", "LV", "IV", "SampleMLE-S", "SampleMLE-C")
CLASSICAL_METHODS = METHODS[:7]


@dataclass
class AteReport:
    """Group means, their difference and its standard error for one method.

    ``tau`` is always ``mu1 - mu0``; ``se`` is NaN when the standard error
    was not requested.
    """

    method: str
    mu1: float
    mu0: float
    se: float = math.nan
    weighted: bool = False
    details: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        self.mu1 = float(self.mu1)
        self.mu0 = float(self.mu0)
        self.se = float(self.se)
        if self.se < 0:
            raise ValueError("standard error must be non-negative")

    @property
    def tau(self) -> float:
        return self.mu1 - self.mu0

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "weighted": self.weighted,
            "mu1": self.mu1,
            "mu0": self.mu0,
            "tau": self.tau,
            "se": self.se,
            "details": to_jsonable(self.details),
        }


@dataclass
class GofReport:
    group: int
    ks: float
    cm: float
    ad: float
    p_ks: float
    p_cm: float
    p_ad: float
    replicates: int
    replicate_size_mean: float
    replicate_size_sd: float
    failures: int = 0
    replicate_stats: list[tuple[float, float, float]] = field(default_factory=list, repr=False)

    def pvalue(self, stat: str) -> float:
        return {"ks": self.p_ks, "cm": self.p_cm, "ad": self.p_ad}[stat]

    def to_dict(self, include_replicates: bool = False) -> dict[str, Any]:
        d = asdict(self)
        if not include_replicates:
            d.pop("replicate_stats")
        return to_jsonable(d)


def to_jsonable(obj):
    """Convert numpy containers and non-finite floats to JSON-safe values.

    NaN and infinities become None so the output is strict JSON.
    """
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    """Deterministic JSON text; floats use the shortest exact round-trip form."""
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=False, allow_nan=False) + "\n"
