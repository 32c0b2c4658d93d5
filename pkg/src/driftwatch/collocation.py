"""Sensor-to-reference-monitor collocation: great-circle matching within a
radius, monitor prioritization, and hourly series merging."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import pandas as pd

from .ingest import SchemaError, format_timestamp_utc, parse_timestamp_utc

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_RADIUS_M = 50.0

# Instrument families that estimate mass from light scattering. Method
# descriptions are matched case-insensitively against these markers;
# anything unmatched is treated as non-light-scattering.
_LIGHT_SCATTERING_MARKERS = ("T640", "GRIMM")
_NON_LIGHT_SCATTERING_MARKERS = ("BAM", "TEOM", "SHARP", "5014I", "FH62C14", "1405")

MERGED_COLUMNS = [
    "hour", "pm25_cf1_mean", "pm25_cf1_a", "pm25_cf1_b",
    "rh_mean", "temp_mean", "pm25_ref",
]


@dataclass(frozen=True)
class MonitorSite:
    site_id: str
    latitude: float
    longitude: float
    method_code: str

    @property
    def monitor_id(self) -> str:
        return f"{self.site_id}|{self.method_code}"


@dataclass(frozen=True)
class CandidateMatch:
    sensor_id: str
    monitor: MonitorSite
    distance_m: float


@dataclass
class CollocationPair:
    """A matched sensor/monitor pair and its merged hourly rows.

    merged holds one row per common hour with all fields non-missing
    (rows with missing or negative reference values are dropped)."""

    sensor_id: str
    monitor_id: str
    distance_m: float
    merged: pd.DataFrame


def haversine_distance(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters between two WGS84 points."""
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlmb = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2.0) ** 2
    return EARTH_RADIUS_M * 2.0 * math.asin(min(1.0, math.sqrt(a)))


def is_light_scattering(method_code: str) -> bool:
    """Classify a monitoring method description as light-scattering."""
    upper = method_code.upper()
    if any(marker in upper for marker in _LIGHT_SCATTERING_MARKERS):
        return True
    if any(marker in upper for marker in _NON_LIGHT_SCATTERING_MARKERS):
        return False
    return False


def match_sensors(sensors, monitors, radius_m: float = DEFAULT_RADIUS_M) -> list[CandidateMatch]:
    """All (outdoor sensor, monitor) pairs within radius_m meters.

    Indoor sensors are excluded from collocation. Multiple candidates per
    sensor are possible; select_reference_monitor resolves them."""
    matches: list[CandidateMatch] = []
    for sensor in sensors:
        if sensor.location != "outside":
            continue
        for mon in monitors:
            d = haversine_distance(sensor.latitude, sensor.longitude, mon.latitude, mon.longitude)
            if d <= radius_m:
                matches.append(CandidateMatch(sensor.sensor_id, mon, d))
    return matches


def select_reference_monitor(candidates: list[CandidateMatch]) -> CandidateMatch:
    """Pick one monitor among a sensor's candidates: non-light-scattering
    instruments first, then nearest distance, then lexicographic monitor_id.
    Deterministic regardless of candidate order."""
    if not candidates:
        raise ValueError("no candidate monitors")
    return min(
        candidates,
        key=lambda c: (is_light_scattering(c.monitor.method_code), c.distance_m, c.monitor.monitor_id),
    )


def select_monitors_per_sensor(matches: list[CandidateMatch]) -> dict[str, CandidateMatch]:
    by_sensor: dict[str, list[CandidateMatch]] = {}
    for match in matches:
        by_sensor.setdefault(match.sensor_id, []).append(match)
    return {sid: select_reference_monitor(cands) for sid, cands in sorted(by_sensor.items())}


def merge_pairs(
    match: CandidateMatch, sensor_hourly: pd.DataFrame, reference_hourly: pd.DataFrame
) -> CollocationPair:
    """Inner-join the sensor's hourly series with its monitor's reference
    series on the hour, dropping rows with missing or negative reference
    values or missing sensor fields. Sensor RH/T travel with the merged
    rows for downstream correction fitting. An empty merge is kept (the
    pair is still reported)."""
    sens = sensor_hourly[sensor_hourly["sensor_id"] == match.sensor_id]
    ref = reference_hourly[reference_hourly["monitor_id"] == match.monitor.monitor_id]
    ref = ref[ref["pm25_ref"].notna() & (ref["pm25_ref"] >= 0)]
    merged = sens.merge(ref[["hour", "pm25_ref"]], on="hour", how="inner")
    merged = merged.dropna(subset=["pm25_cf1_mean", "pm25_cf1_a", "pm25_cf1_b", "rh_mean", "temp_mean"])
    merged = merged[MERGED_COLUMNS].sort_values("hour").reset_index(drop=True)
    return CollocationPair(
        sensor_id=match.sensor_id,
        monitor_id=match.monitor.monitor_id,
        distance_m=match.distance_m,
        merged=merged,
    )


def read_monitor_sites(path) -> list[MonitorSite]:
    """Monitor site CSV: site_id,lat,lon,method_code. One row per
    (site, method); a mid-period method change at a site appears as two
    rows and yields two distinct monitor identities."""
    sites = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"site_id", "lat", "lon", "method_code"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise SchemaError(f"monitor sites file must have columns {sorted(required)}")
        for row in reader:
            sites.append(
                MonitorSite(
                    site_id=row["site_id"].strip(),
                    latitude=float(row["lat"]),
                    longitude=float(row["lon"]),
                    method_code=row["method_code"].strip(),
                )
            )
    return sites


def read_reference_csv(path) -> pd.DataFrame:
    """Reference hourly CSV: site_id,hour,pm25_ref,method_code. Adds the
    composite monitor_id column. Negative/missing values survive reading;
    they are dropped at merge time."""
    df = pd.read_csv(path, dtype={"site_id": str, "method_code": str})
    required = {"site_id", "hour", "pm25_ref", "method_code"}
    if not required.issubset(df.columns):
        raise SchemaError(f"reference file must have columns {sorted(required)}")
    df["hour"] = df["hour"].map(parse_timestamp_utc)
    df["monitor_id"] = df["site_id"] + "|" + df["method_code"]
    return df


def write_pair_manifest(pairs: list[CollocationPair], path) -> None:
    rows = [
        {
            "sensor_id": p.sensor_id,
            "monitor_id": p.monitor_id,
            "distance_m": round(p.distance_m, 3),
            "n_merged": len(p.merged),
        }
        for p in sorted(pairs, key=lambda p: (p.sensor_id, p.monitor_id))
    ]
    pd.DataFrame(rows, columns=["sensor_id", "monitor_id", "distance_m", "n_merged"]).to_csv(
        path, index=False
    )


def write_merged_csv(pair: CollocationPair, path) -> None:
    out = pair.merged.copy()
    out.insert(0, "sensor_id", pair.sensor_id)
    out.insert(1, "monitor_id", pair.monitor_id)
    out["hour"] = out["hour"].map(format_timestamp_utc)
    out.to_csv(path, index=False)


def read_merged_csv(path) -> CollocationPair:
    df = pd.read_csv(path, dtype={"sensor_id": str, "monitor_id": str})
    df["hour"] = df["hour"].map(parse_timestamp_utc)
    sensor_id = df["sensor_id"].iloc[0] if len(df) else ""
    monitor_id = df["monitor_id"].iloc[0] if len(df) else ""
    return CollocationPair(
        sensor_id=sensor_id,
        monitor_id=monitor_id,
        distance_m=float("nan"),
        merged=df[MERGED_COLUMNS].reset_index(drop=True),
    )
