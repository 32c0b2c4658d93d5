"""Synthetic dual-channel fleet generator.

Builds desk-scale fleets with known ground truth: a shared reference
concentration process, per-sensor raw channels derived from it by
inverting a planted correction (so a downstream fit can recover the
planted coefficients), and injected degradations with recorded labels.
Outputs are written in the exact CSV schemas the ingestion and
collocation stages consume.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from datetime import timedelta
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .ingest import parse_timestamp_utc

INJECTION_MODES = ("channel_divergence", "channel_death", "drift_slope", "burn_in_noise")


@dataclass
class Injection:
    """A planted degradation on one sensor's channel B.

    channel_divergence: adds `magnitude` to an exact-count random subset
        (share `fraction`) of the hours at or after onset_hour.
    channel_death: channel B reports 0 from onset_hour onward.
    drift_slope: per-hour divergence probability grows linearly,
        p_start + slope_per_year * (hour / 8760).
    burn_in_noise: divergence with probability 0.5 on each hour before
        onset_hour (early-life misbehavior).
    """

    sensor_index: int
    mode: str
    onset_hour: int = 0
    magnitude: float = 25.0
    fraction: Optional[float] = None
    p_start: float = 0.0
    slope_per_year: Optional[float] = None

    def __post_init__(self):
        if self.mode not in INJECTION_MODES:
            raise ValueError(f"unknown injection mode {self.mode!r}")


@dataclass
class ScenarioConfig:
    n_sensors: int = 5
    hours: int = 500
    start: str = "2019-01-01T00:00:00Z"
    seed: int = 0

    # Reference concentration process: lognormal AR(1).
    pm_log_mean: float = 2.6
    pm_log_sd: float = 0.5
    pm_ar1: float = 0.95

    channel_noise_sd: float = 0.5

    rh_mean: float = 50.0
    rh_amplitude: float = 15.0
    rh_noise_sd: float = 2.0
    temp_mean: float = 15.0
    temp_amplitude: float = 8.0
    temp_noise_sd: float = 1.0

    # Planted correction: ref = intercept + pm_coef * PM + rh_coef * RH.
    corr_intercept: float = 5.92
    corr_pm: float = 0.57
    corr_rh: float = -0.091

    flag_rate_slope_per_year: float = 0.0093
    stagger_starts_hours: int = 0
    inside_sensors: tuple[int, ...] = ()
    zone_labels: tuple[str, ...] = ("Hot-Dry",)

    site_id: str = "REF001"
    site_lat: float = 40.0
    site_lon: float = -105.0
    method_code: str = "BAM-1020"

    injections: list[Injection] = field(default_factory=list)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        doc = dict(doc)
        injections = [Injection(**inj) for inj in doc.pop("injections", [])]
        doc["inside_sensors"] = tuple(doc.get("inside_sensors", ()))
        doc["zone_labels"] = tuple(doc.get("zone_labels", ("Hot-Dry",)))
        return cls(injections=injections, **doc)

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["inside_sensors"] = list(self.inside_sensors)
        doc["zone_labels"] = list(self.zone_labels)
        return doc


def _sensor_id(i: int) -> str:
    return f"SYN{i:04d}"


def _sensor_position(config: ScenarioConfig, i: int) -> tuple[float, float]:
    # Ring placement 10-30 m from the site keeps every sensor inside the
    # default 50 m collocation radius.
    radius_m = 10.0 + 20.0 * (i / max(1, config.n_sensors))
    angle = 2.0 * math.pi * i / max(1, config.n_sensors)
    dlat = radius_m * math.cos(angle) / 111_320.0
    dlon = radius_m * math.sin(angle) / (111_320.0 * math.cos(math.radians(config.site_lat)))
    return config.site_lat + dlat, config.site_lon + dlon


def _reference_process(config: ScenarioConfig, total_hours: int, rng: np.random.Generator) -> np.ndarray:
    z = np.empty(total_hours)
    z[0] = rng.standard_normal()
    innovations = rng.standard_normal(total_hours)
    scale = math.sqrt(1.0 - config.pm_ar1**2)
    for h in range(1, total_hours):
        z[h] = config.pm_ar1 * z[h - 1] + scale * innovations[h]
    return np.exp(config.pm_log_mean + config.pm_log_sd * z)


def _diurnal(total_hours: int, mean: float, amplitude: float, noise_sd: float,
             phase: float, rng: np.random.Generator) -> np.ndarray:
    hours = np.arange(total_hours)
    base = mean + amplitude * np.sin(2.0 * math.pi * (hours + phase) / 24.0)
    return base + rng.normal(0.0, noise_sd, total_hours)


def _divergence_hours(inj: Injection, n_hours: int, rng: np.random.Generator,
                      default_slope: float) -> np.ndarray:
    """Hour indices (relative to the sensor's own series) that the
    injection corrupts."""
    if inj.mode == "channel_divergence":
        if inj.fraction is None:
            raise ValueError("channel_divergence needs a fraction")
        window = np.arange(inj.onset_hour, n_hours)
        count = int(round(inj.fraction * window.size))
        chosen = rng.choice(window, size=min(count, window.size), replace=False)
        return np.sort(chosen)
    if inj.mode == "channel_death":
        return np.arange(inj.onset_hour, n_hours)
    if inj.mode == "drift_slope":
        slope = inj.slope_per_year if inj.slope_per_year is not None else default_slope
        hours = np.arange(inj.onset_hour, n_hours)
        p = np.clip(inj.p_start + slope * hours / 8760.0, 0.0, 1.0)
        return hours[rng.random(hours.size) < p]
    if inj.mode == "burn_in_noise":
        hours = np.arange(0, min(inj.onset_hour, n_hours))
        return hours[rng.random(hours.size) < 0.5]
    raise ValueError(f"unknown injection mode {inj.mode!r}")


def _atm_from_cf1(cf1: np.ndarray) -> np.ndarray:
    # cf_atm tracks cf_1 at low concentrations and two-thirds of it above.
    return np.where(cf1 <= 25.0, cf1, 25.0 + (cf1 - 25.0) * (2.0 / 3.0))


def generate(config: ScenarioConfig, out_dir) -> dict:
    """Write a synthetic scenario under out_dir and return the label
    document (also stored as labels.json).

    Layout: raw/<sensor_id>.csv (15-minute records, four per hour),
    reference.csv, sites.csv, meta.csv, zones.csv, labels.json. The
    reference series IS the truth process; each sensor's raw PM is the
    truth mapped through the inverse of the planted correction using that
    sensor's own RH, plus channel noise and any injected degradations.
    Output is deterministic for a fixed config (seed included).
    """
    out_dir = Path(out_dir)
    raw_dir = out_dir / "raw"
    raw_dir.mkdir(parents=True, exist_ok=True)

    seeds = np.random.SeedSequence(config.seed).spawn(config.n_sensors + 2)
    truth_rng = np.random.Generator(np.random.PCG64(seeds[0]))
    stagger_rng = np.random.Generator(np.random.PCG64(seeds[1]))

    offsets = (
        stagger_rng.integers(0, config.stagger_starts_hours + 1, size=config.n_sensors)
        if config.stagger_starts_hours > 0
        else np.zeros(config.n_sensors, dtype=int)
    )
    total_hours = int(offsets.max()) + config.hours
    ref = _reference_process(config, total_hours, truth_rng)

    start = parse_timestamp_utc(config.start)
    hour_stamps = [start + timedelta(hours=int(h)) for h in range(total_hours)]

    injections_by_sensor: dict[int, list[Injection]] = {}
    for inj in config.injections:
        if not 0 <= inj.sensor_index < config.n_sensors:
            raise ValueError(f"injection sensor_index {inj.sensor_index} out of range")
        injections_by_sensor.setdefault(inj.sensor_index, []).append(inj)

    labels: dict = {"seed": config.seed, "sensors": {}}
    meta_rows = []
    zone_rows = []

    for i in range(config.n_sensors):
        sensor_id = _sensor_id(i)
        rng = np.random.Generator(np.random.PCG64(seeds[i + 2]))
        offset = int(offsets[i])
        n_hours = config.hours
        phase = rng.uniform(0.0, 24.0)
        rh = np.clip(
            _diurnal(n_hours, config.rh_mean, config.rh_amplitude, config.rh_noise_sd, phase, rng),
            0.0, 99.0,
        )
        temp = np.clip(
            _diurnal(n_hours, config.temp_mean, config.temp_amplitude, config.temp_noise_sd, phase, rng),
            -40.0, 60.0,
        )
        ref_slice = ref[offset : offset + n_hours]
        pm_true = np.maximum(
            0.0, (ref_slice - config.corr_intercept - config.corr_rh * rh) / config.corr_pm
        )

        # 15-minute channels: truth plus independent noise per sub-record.
        pm_sub = np.repeat(pm_true, 4)
        a = np.maximum(0.0, pm_sub + rng.normal(0.0, config.channel_noise_sd, pm_sub.size))
        b = np.maximum(0.0, pm_sub + rng.normal(0.0, config.channel_noise_sd, pm_sub.size))

        sensor_labels = []
        dead_hours = np.zeros(n_hours, dtype=bool)
        for inj in injections_by_sensor.get(i, []):
            hit = _divergence_hours(inj, n_hours, rng, config.flag_rate_slope_per_year)
            if inj.mode == "channel_death":
                for h in hit:
                    b[4 * h : 4 * h + 4] = 0.0
                dead_hours[hit] = True
            else:
                for h in hit:
                    b[4 * h : 4 * h + 4] += inj.magnitude
            sensor_labels.append(
                {
                    "mode": inj.mode,
                    "onset_hour": inj.onset_hour,
                    "magnitude": inj.magnitude,
                    "fraction": inj.fraction,
                    "injected_hours": [int(h) for h in hit],
                }
            )
        labels["sensors"][sensor_id] = {
            "injections": sensor_labels,
            "clean": not sensor_labels,
            "start_offset_hours": offset,
        }

        stamp_idx = np.repeat(np.arange(n_hours), 4)
        quarter = np.tile(np.arange(4), n_hours)
        timestamps = [
            (hour_stamps[offset + int(h)] + timedelta(minutes=15 * int(q))).strftime(
                "%Y-%m-%dT%H:%M:%SZ"
            )
            for h, q in zip(stamp_idx, quarter)
        ]
        frame = pd.DataFrame(
            {
                "sensor_id": sensor_id,
                "timestamp": timestamps,
                "pm25_cf1_a": np.round(a, 3),
                "pm25_cf1_b": np.round(b, 3),
                "pm25_atm_a": np.round(_atm_from_cf1(a), 3),
                "pm25_atm_b": np.round(_atm_from_cf1(b), 3),
                "temp": np.round(np.repeat(temp, 4), 2),
                "rh": np.round(np.repeat(rh, 4), 2),
            }
        )
        frame.to_csv(raw_dir / f"{sensor_id}.csv", index=False)

        lat, lon = _sensor_position(config, i)
        meta_rows.append(
            {
                "sensor_id": sensor_id,
                "lat": round(lat, 7),
                "lon": round(lon, 7),
                "location": "inside" if i in config.inside_sensors else "outside",
            }
        )
        zone_rows.append(
            {"sensor_id": sensor_id, "zone": config.zone_labels[i % len(config.zone_labels)]}
        )

    reference = pd.DataFrame(
        {
            "site_id": config.site_id,
            "hour": [ts.strftime("%Y-%m-%dT%H:%M:%SZ") for ts in hour_stamps],
            "pm25_ref": np.round(ref, 3),
            "method_code": config.method_code,
        }
    )
    reference.to_csv(out_dir / "reference.csv", index=False)
    pd.DataFrame(
        [
            {
                "site_id": config.site_id,
                "lat": config.site_lat,
                "lon": config.site_lon,
                "method_code": config.method_code,
            }
        ]
    ).to_csv(out_dir / "sites.csv", index=False)
    pd.DataFrame(meta_rows).to_csv(out_dir / "meta.csv", index=False)
    pd.DataFrame(zone_rows).to_csv(out_dir / "zones.csv", index=False)
    with open(out_dir / "labels.json", "w", encoding="utf-8") as fh:
        json.dump(labels, fh, indent=2, sort_keys=True)
    return labels
