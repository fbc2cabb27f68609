"""Analysis settings shared by every pipeline step."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np


@dataclass(frozen=True)
class StudySettings:
    risk_strata_count: int = 4
    ps_strata_count: int = 5
    caliper: float = 0.2  # SDs of the logit propensity score
    cv_folds: int = 3
    time_at_risk_days: int = 730
    lambda_grid: tuple[float, ...] | None = None  # None: 20 values from lambda_max per fit
    seed: int = 0
    estimand: str = "ATT"
    outcome_ids: tuple[str, ...] = ()
    negative_control_ids: tuple[str, ...] = ()
    min_events: int = 25
    equipoise_threshold: float = 0.2
    smd_threshold: float = 0.1
    nc_alpha: float = 0.05
    nc_max_significant_fraction: float = 0.10
    ties: str = "efron"
    drop_early_censored: bool = False
    bootstrap_reps: int = 500
    external_models: dict = field(default_factory=dict)

    def errors(self) -> list[str]:
        out = []
        if self.risk_strata_count < 2:
            out.append("risk_strata_count must be >= 2")
        if self.ps_strata_count < 1:
            out.append("ps_strata_count must be >= 1")
        if self.cv_folds < 2:
            out.append("cv_folds must be >= 2")
        if self.caliper <= 0:
            out.append("caliper must be > 0")
        if self.time_at_risk_days < 1:
            out.append("time_at_risk_days must be >= 1")
        if self.lambda_grid is not None:
            g = np.asarray(self.lambda_grid, float)
            if g.size == 0 or (g <= 0).any():
                out.append("lambda_grid must be non-empty and strictly positive")
            elif (np.diff(g) >= 0).any():
                out.append("lambda_grid must be strictly decreasing")
        if self.estimand not in ("ATE", "ATT"):
            out.append("estimand must be ATE or ATT")
        if self.ties not in ("efron", "breslow"):
            out.append("ties must be efron or breslow")
        overlap = set(self.outcome_ids) & set(self.negative_control_ids)
        if overlap:
            out.append(f"outcome and negative-control ids overlap: {sorted(overlap)}")
        if self.bootstrap_reps < 0:
            out.append("bootstrap_reps must be >= 0")
        if self.min_events < 1:
            out.append("min_events must be >= 1")
        return out

    def validate(self) -> "StudySettings":
        errs = self.errors()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    @property
    def grid(self):
        return None if self.lambda_grid is None else np.asarray(self.lambda_grid, float)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda_grid"] = None if self.lambda_grid is None else list(self.lambda_grid)
        d["outcome_ids"] = list(self.outcome_ids)
        d["negative_control_ids"] = list(self.negative_control_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudySettings":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown settings: {sorted(unknown)}")
        d = dict(d)
        for key in ("outcome_ids", "negative_control_ids"):
            if key in d:
                d[key] = tuple(str(x) for x in d[key])
        if d.get("lambda_grid") is not None:
            d["lambda_grid"] = tuple(float(x) for x in d["lambda_grid"])
        return cls(**d)


def task_seed(seed: int, *keys) -> int:
    """Deterministic 32-bit seed for a task identified by ``keys``."""
    words = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])
