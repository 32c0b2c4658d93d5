"""Raw 15-minute sensor record parsing, QC filtering, hourly aggregation,
burn-in trimming, and sensor metadata enrichment (climate zones).

All timestamps are normalized to UTC. Temperatures are Celsius internally;
the input unit is declared in the column schema.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, asdict
from datetime import datetime, timedelta, timezone
from typing import Iterable, Optional

import pandas as pd

CLIMATE_ZONES = (
    "Cold",
    "Hot-Dry",
    "Hot-Humid",
    "Marine",
    "Mixed-Dry",
    "Mixed-Humid",
    "SubArctic",
    "VeryCold",
    "Unknown",
)

# QC bounds; see qc_filter for the rule order.
CHANNEL_MAX_UGM3 = 1500.0
TEMP_MIN_C = -50.0
TEMP_MAX_C = 100.0
RH_MAX_PCT = 99.0
MIN_SUBHOURLY = 3
DEFAULT_BURN_IN_HOURS = 20


class SchemaError(ValueError):
    """Raised when an input file does not match its declared schema."""


@dataclass(frozen=True)
class RawRecord:
    """One 15-minute observation from a dual-channel sensor."""

    sensor_id: str
    timestamp: datetime  # UTC
    pm25_cf1_a: Optional[float] = None
    pm25_cf1_b: Optional[float] = None
    pm25_atm_a: Optional[float] = None
    pm25_atm_b: Optional[float] = None
    rh: Optional[float] = None
    temp: Optional[float] = None  # Celsius


@dataclass(frozen=True)
class HourlyRecord:
    """QC'd hourly aggregate of sub-hourly records for one sensor.

    pm25_cf1_mean is the mean of the available hourly channel means (the
    midpoint of A and B when both channels reported in the hour). The hour
    is the left-closed UTC hour start. n_subhourly counts channel-A records.
    """

    sensor_id: str
    hour: datetime
    pm25_cf1_mean: float
    pm25_cf1_a: float
    pm25_cf1_b: Optional[float]
    pm25_atm_mean: Optional[float]
    rh_mean: float
    temp_mean: float
    n_subhourly: int


@dataclass
class SensorMeta:
    sensor_id: str
    latitude: float
    longitude: float
    location: str  # "inside" | "outside"
    deploy_start: Optional[datetime] = None
    climate_zone: str = "Unknown"


@dataclass
class QcReport:
    """Per-rule rejection counts; each input record is attributed to the
    first matching rule, so the counts partition the input."""

    missing_pm: int = 0
    missing_met: int = 0
    both_over_1500: int = 0
    temp_out_of_range: int = 0
    rh_over_99: int = 0
    retained: int = 0

    @property
    def total(self) -> int:
        return (
            self.missing_pm
            + self.missing_met
            + self.both_over_1500
            + self.temp_out_of_range
            + self.rh_over_99
            + self.retained
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParseReport:
    rows_read: int = 0
    rows_parsed: int = 0
    bad_rows: int = 0
    negative_concentration: int = 0
    bad_timestamp: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RawSchema:
    """Column mapping for raw sensor CSV files.

    temp_unit declares the temperature unit of the input ("C" or "F");
    values are converted to Celsius at parse time.
    """

    sensor_id: str = "sensor_id"
    timestamp: str = "timestamp"
    pm25_cf1_a: str = "pm25_cf1_a"
    pm25_cf1_b: str = "pm25_cf1_b"
    pm25_atm_a: str = "pm25_atm_a"
    pm25_atm_b: str = "pm25_atm_b"
    temp: str = "temp"
    rh: str = "rh"
    temp_unit: str = "C"


def parse_timestamp_utc(raw: str) -> datetime:
    """Parse an ISO-8601 timestamp, normalizing to UTC. Naive timestamps
    are taken as UTC already."""
    raw = raw.strip()
    if raw.endswith("Z"):
        raw = raw[:-1] + "+00:00"
    dt = datetime.fromisoformat(raw)
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_timestamp_utc(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_optional_float(raw: str) -> Optional[float]:
    raw = raw.strip()
    if raw == "" or raw.upper() in ("NA", "NAN", "NULL"):
        return None
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError(f"non-finite value {raw!r}")
    return value


def parse_raw(source, schema: RawSchema = RawSchema()) -> tuple[list[RawRecord], ParseReport]:
    """Parse a delimited raw-sensor file into RawRecords.

    source may be a path or a text/binary file object. Unparseable rows are
    counted and skipped; rows carrying a negative concentration are rejected
    here (retained concentrations are finite and >= 0). A missing schema
    column is fatal and the error names the column.
    """
    if hasattr(source, "read"):
        stream = source
        if isinstance(stream.read(0), bytes):
            stream = io.TextIOWrapper(stream, encoding="utf-8")
        return _parse_raw_stream(stream, schema)
    with open(source, "r", encoding="utf-8", newline="") as fh:
        return _parse_raw_stream(fh, schema)


def _parse_raw_stream(stream, schema: RawSchema) -> tuple[list[RawRecord], ParseReport]:
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty input: no header row")
    header = [h.strip() for h in header]
    col_idx = {}
    for attr in ("sensor_id", "timestamp", "pm25_cf1_a", "pm25_cf1_b",
                 "pm25_atm_a", "pm25_atm_b", "temp", "rh"):
        name = getattr(schema, attr)
        if name not in header:
            raise SchemaError(f"required column {name!r} not found in header")
        col_idx[attr] = header.index(name)
    if schema.temp_unit not in ("C", "F"):
        raise SchemaError(f"temp_unit must be 'C' or 'F', got {schema.temp_unit!r}")

    report = ParseReport()
    records: list[RawRecord] = []
    conc_fields = ("pm25_cf1_a", "pm25_cf1_b", "pm25_atm_a", "pm25_atm_b")
    for row in reader:
        if not row or all(cell.strip() == "" for cell in row):
            continue
        report.rows_read += 1
        try:
            ts = parse_timestamp_utc(row[col_idx["timestamp"]])
        except (ValueError, IndexError):
            report.bad_rows += 1
            report.bad_timestamp += 1
            continue
        try:
            values = {f: _parse_optional_float(row[col_idx[f]]) for f in conc_fields}
            rh = _parse_optional_float(row[col_idx["rh"]])
            temp = _parse_optional_float(row[col_idx["temp"]])
        except (ValueError, IndexError):
            report.bad_rows += 1
            continue
        if any(v is not None and v < 0 for v in values.values()):
            report.bad_rows += 1
            report.negative_concentration += 1
            continue
        if temp is not None and schema.temp_unit == "F":
            temp = (temp - 32.0) * 5.0 / 9.0
        records.append(
            RawRecord(
                sensor_id=row[col_idx["sensor_id"]].strip(),
                timestamp=ts,
                pm25_cf1_a=values["pm25_cf1_a"],
                pm25_cf1_b=values["pm25_cf1_b"],
                pm25_atm_a=values["pm25_atm_a"],
                pm25_atm_b=values["pm25_atm_b"],
                rh=rh,
                temp=temp,
            )
        )
        report.rows_parsed += 1
    return records, report


def qc_filter(
    records: Iterable[RawRecord],
    channel_max: float = CHANNEL_MAX_UGM3,
    temp_min: float = TEMP_MIN_C,
    temp_max: float = TEMP_MAX_C,
    rh_max: float = RH_MAX_PCT,
) -> tuple[list[RawRecord], QcReport]:
    """Remove records failing the exclusion rules, attributing each
    rejection to the first matching rule, in order:

    1. both cf_1 channels missing
    2. temperature or RH missing
    3. both cf_1 channels strictly above channel_max
    4. temperature <= temp_min or >= temp_max
    5. RH strictly above rh_max

    Records missing exactly one cf_1 channel pass rule 1 (only dual-missing
    records are dropped); rule 3 can only fire when both channels report.
    """
    report = QcReport()
    retained: list[RawRecord] = []
    for rec in records:
        if rec.pm25_cf1_a is None and rec.pm25_cf1_b is None:
            report.missing_pm += 1
        elif rec.temp is None or rec.rh is None:
            report.missing_met += 1
        elif (
            rec.pm25_cf1_a is not None
            and rec.pm25_cf1_b is not None
            and rec.pm25_cf1_a > channel_max
            and rec.pm25_cf1_b > channel_max
        ):
            report.both_over_1500 += 1
        elif rec.temp <= temp_min or rec.temp >= temp_max:
            report.temp_out_of_range += 1
        elif rec.rh > rh_max:
            report.rh_over_99 += 1
        else:
            report.retained += 1
            retained.append(rec)
    return retained, report


def _floor_hour(dt: datetime) -> datetime:
    return dt.replace(minute=0, second=0, microsecond=0)


def _mean_or_none(values: list[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def aggregate_hourly(
    records: Iterable[RawRecord], min_subhourly: int = MIN_SUBHOURLY
) -> list[HourlyRecord]:
    """Aggregate QC'd records into hourly means.

    Records are bucketed into left-closed UTC hours [h, h+1). An hour is
    emitted only when at least min_subhourly records carry a channel-A cf_1
    value (the completeness check is judged on channel A). Each hourly field
    is the arithmetic mean of the non-missing sub-hourly values; the combined
    cf_1 mean is the mean of the available channel means. Output order is
    (sensor_id, hour); the result does not depend on input record order.
    """
    buckets: dict[tuple[str, datetime], list[RawRecord]] = {}
    for rec in records:
        buckets.setdefault((rec.sensor_id, _floor_hour(rec.timestamp)), []).append(rec)

    out: list[HourlyRecord] = []
    for (sensor_id, hour) in sorted(buckets):
        recs = buckets[(sensor_id, hour)]
        a_vals = [r.pm25_cf1_a for r in recs if r.pm25_cf1_a is not None]
        if len(a_vals) < min_subhourly:
            continue
        b_vals = [r.pm25_cf1_b for r in recs if r.pm25_cf1_b is not None]
        rh_vals = [r.rh for r in recs if r.rh is not None]
        t_vals = [r.temp for r in recs if r.temp is not None]
        atm_channel_means = [
            m
            for m in (
                _mean_or_none([r.pm25_atm_a for r in recs if r.pm25_atm_a is not None]),
                _mean_or_none([r.pm25_atm_b for r in recs if r.pm25_atm_b is not None]),
            )
            if m is not None
        ]
        a_mean = _mean_or_none(a_vals)
        b_mean = _mean_or_none(b_vals)
        channel_means = [m for m in (a_mean, b_mean) if m is not None]
        out.append(
            HourlyRecord(
                sensor_id=sensor_id,
                hour=hour,
                pm25_cf1_mean=sum(channel_means) / len(channel_means),
                pm25_cf1_a=a_mean,
                pm25_cf1_b=b_mean,
                pm25_atm_mean=_mean_or_none(atm_channel_means),
                rh_mean=_mean_or_none(rh_vals),
                temp_mean=_mean_or_none(t_vals),
                n_subhourly=len(a_vals),
            )
        )
    return out


def trim_burn_in(
    hourly: Iterable[HourlyRecord], n_hours: int = DEFAULT_BURN_IN_HOURS
) -> list[HourlyRecord]:
    """Drop each sensor's first n_hours operational hours (hours with data,
    in hour order). n_hours=0 is the identity."""
    if n_hours < 0:
        raise ValueError("n_hours must be >= 0")
    by_sensor: dict[str, list[HourlyRecord]] = {}
    for rec in hourly:
        by_sensor.setdefault(rec.sensor_id, []).append(rec)
    out: list[HourlyRecord] = []
    for sensor_id in sorted(by_sensor):
        series = sorted(by_sensor[sensor_id], key=lambda r: r.hour)
        out.extend(series[n_hours:])
    return out


def hourly_frame(hourly: Iterable[HourlyRecord]) -> pd.DataFrame:
    """HourlyRecords as a DataFrame (the interchange format for the
    analytics stages)."""
    rows = [
        {
            "sensor_id": r.sensor_id,
            "hour": r.hour,
            "pm25_cf1_mean": r.pm25_cf1_mean,
            "pm25_cf1_a": r.pm25_cf1_a,
            "pm25_cf1_b": r.pm25_cf1_b,
            "pm25_atm_mean": r.pm25_atm_mean,
            "rh_mean": r.rh_mean,
            "temp_mean": r.temp_mean,
            "n_subhourly": r.n_subhourly,
        }
        for r in hourly
    ]
    df = pd.DataFrame(
        rows,
        columns=[
            "sensor_id", "hour", "pm25_cf1_mean", "pm25_cf1_a", "pm25_cf1_b",
            "pm25_atm_mean", "rh_mean", "temp_mean", "n_subhourly",
        ],
    )
    return df


def write_hourly_csv(hourly: Iterable[HourlyRecord], path) -> None:
    df = hourly_frame(hourly)
    df = df.copy()
    df["hour"] = df["hour"].map(format_timestamp_utc)
    df.to_csv(path, index=False)


def read_hourly_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    df["hour"] = df["hour"].map(parse_timestamp_utc)
    return df


def deploy_starts(records: Iterable[RawRecord]) -> dict[str, datetime]:
    """First retained timestamp per sensor (the operational-time origin)."""
    starts: dict[str, datetime] = {}
    for rec in records:
        prev = starts.get(rec.sensor_id)
        if prev is None or rec.timestamp < prev:
            starts[rec.sensor_id] = rec.timestamp
    return starts


def read_sensor_meta(path) -> list[SensorMeta]:
    """Read the sensor metadata CSV (sensor_id,lat,lon,location)."""
    metas = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"sensor_id", "lat", "lon", "location"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise SchemaError(
                f"sensor metadata must have columns {sorted(required)}, "
                f"got {reader.fieldnames}"
            )
        for row in reader:
            lat = float(row["lat"])
            lon = float(row["lon"])
            if abs(lat) > 90 or abs(lon) > 180:
                raise SchemaError(
                    f"coordinates out of range for sensor {row['sensor_id']!r}"
                )
            location = row["location"].strip().lower()
            if location not in ("inside", "outside"):
                raise SchemaError(
                    f"location must be 'inside' or 'outside', got {row['location']!r}"
                )
            metas.append(
                SensorMeta(
                    sensor_id=row["sensor_id"].strip(),
                    latitude=lat,
                    longitude=lon,
                    location=location,
                )
            )
    return metas


def load_zone_table(path) -> dict[str, str]:
    """Read a direct sensor_id -> climate zone table."""
    table: dict[str, str] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"sensor_id", "zone"}.issubset(reader.fieldnames):
            raise SchemaError("zone table must have columns sensor_id,zone")
        for row in reader:
            zone = row["zone"].strip()
            if zone not in CLIMATE_ZONES:
                raise SchemaError(f"unknown climate zone {zone!r}")
            table[row["sensor_id"].strip()] = zone
    return table


def load_zone_polygons(path) -> list[tuple[str, "object"]]:
    """Read a GeoJSON FeatureCollection of zone polygons, preserving file
    order (ties on shared boundaries resolve to the first feature)."""
    import json

    from shapely.geometry import shape

    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise SchemaError("zone polygon file must be a GeoJSON FeatureCollection")
    polygons = []
    for feature in doc.get("features", []):
        try:
            zone = feature["properties"]["zone"]
            geom = shape(feature["geometry"])
        except (KeyError, TypeError, AttributeError) as exc:
            raise SchemaError(f"malformed zone feature: {exc}") from exc
        if zone not in CLIMATE_ZONES:
            raise SchemaError(f"unknown climate zone {zone!r}")
        polygons.append((zone, geom))
    return polygons


def assign_climate_zone(meta: SensorMeta, zones) -> SensorMeta:
    """Set meta.climate_zone from either a sensor_id->zone dict or an
    ordered list of (zone, polygon) pairs. Points matching no zone get
    "Unknown". Boundary points match the first covering polygon in file
    order."""
    if isinstance(zones, dict):
        meta.climate_zone = zones.get(meta.sensor_id, "Unknown")
        return meta
    from shapely.geometry import Point

    point = Point(meta.longitude, meta.latitude)
    for zone, polygon in zones:
        if polygon.covers(point):
            meta.climate_zone = zone
            return meta
    meta.climate_zone = "Unknown"
    return meta


def op_hours(hour_series: pd.Series, deploy_start: datetime) -> pd.Series:
    """Whole hours elapsed since deploy_start (the operational-time axis).
    The origin is deploy_start's hour, so a sensor deploying mid-hour has
    its first hourly record at operational hour 0."""
    delta = hour_series - _floor_hour(deploy_start)
    return (delta / timedelta(hours=1)).round().astype(int)
