"""Pipeline configuration: tunable thresholds with their package-wide
defaults, loadable from a JSON key-value file."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional


@dataclass
class PipelineConfig:
    # QC bounds for 15-minute records
    channel_max: float = 1500.0
    temp_min: float = -50.0
    temp_max: float = 100.0
    rh_max: float = 99.0
    min_subhourly: int = 3  # hourly completeness, out of 4

    # Burn-in trim applied before trend/GAM fitting (flag series and
    # sweep stay untrimmed so early-life behavior remains visible)
    burn_in_hours: int = 20

    # Flag rule
    abs_threshold: float = 5.0
    percentile: float = 0.85
    grid_step: float = 0.01
    use_swept_percentile: bool = False

    # Permanent degradation policy
    degraded_threshold: float = 0.4
    degraded_min_hours: int = 100

    # Collocation
    radius_m: float = 50.0

    # Correction
    correction_model: int = 2
    run_loso: bool = True

    # Trends / smoothing
    hours_per_year: float = 8760.0
    weight_trends_by_n: bool = False  # weight flag-rate fits by hourly measurement count
    cluster_robust: bool = False  # sensor-clustered SEs for row-level error trends
    basis_size: int = 20
    replicates: int = 100
    bootstrap_m: Optional[int] = None
    exceedance_thresholds: tuple[float, ...] = (50.0, 100.0, 500.0)

    seed: int = 42
    temp_unit: str = "C"
    threads: int = 1

    # report inputs: either a directory of pre-generated inputs or an
    # inline synthetic scenario
    input_dir: Optional[str] = None
    scenario: Optional[dict] = field(default=None, repr=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "exceedance_thresholds" in doc:
            doc["exceedance_thresholds"] = tuple(float(t) for t in doc["exceedance_thresholds"])
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["exceedance_thresholds"] = list(self.exceedance_thresholds)
        return doc
