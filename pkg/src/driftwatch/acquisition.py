"""HTTP clients that download historical sensor records and regulatory
hourly PM2.5 into the pipeline's file schemas.

The clients only ever write files; analytics stages read those files. A
manifest records every window fetched so an interrupted job can resume
without re-requesting completed windows. Requests honor a per-minute rate
limit enforced through an injectable clock, and transient failures retry
with exponential backoff (base 1 s, factor 2, up to 5 attempts).

Request/response contracts are intentionally minimal: the sensor history
endpoint returns CSV with columns time_stamp (unix seconds),
pm2.5_cf_1_a/b, pm2.5_atm_a/b, humidity, temperature (Fahrenheit,
written through verbatim); the regulatory endpoint returns JSON pages of
{"Data": [{"site_id", "date_gmt", "time_gmt", "sample_measurement",
"method_code"}]} where an empty page ends pagination.
"""

from __future__ import annotations

import csv
import io
import json
import time as _time
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional

import requests

from .ingest import format_timestamp_utc, parse_timestamp_utc

SENSOR_API_URL = "https://api.sensors.example/v1"
AQS_API_URL = "https://aqs.epa.gov/data/api"

MAX_ATTEMPTS = 5
BACKOFF_BASE_S = 1.0
BACKOFF_FACTOR = 2.0
RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class CredentialError(RuntimeError):
    """Raised on HTTP 401/403: the job cannot proceed without valid keys."""


class SystemClock:
    def monotonic(self) -> float:
        return _time.monotonic()

    def sleep(self, seconds: float) -> None:
        _time.sleep(seconds)


class RateLimiter:
    """Sliding-window limiter: at most `per_minute` requests in any 60 s."""

    def __init__(self, per_minute: int, clock=None):
        if per_minute < 1:
            raise ValueError("rate limit must be >= 1 request/minute")
        self.per_minute = per_minute
        self.clock = clock or SystemClock()
        self._sent: list[float] = []

    def acquire(self) -> None:
        now = self.clock.monotonic()
        self._sent = [t for t in self._sent if now - t < 60.0]
        if len(self._sent) >= self.per_minute:
            wait = 60.0 - (now - self._sent[0])
            if wait > 0:
                self.clock.sleep(wait)
            now = self.clock.monotonic()
            self._sent = [t for t in self._sent if now - t < 60.0]
        self._sent.append(now)


@dataclass
class FetchJob:
    source: str  # "sensor_api" | "aqs_api"
    ids: list[str]
    start: datetime
    end: datetime
    page_days: int = 5
    rate_limit_per_min: int = 60
    base_url: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("sensor_api", "aqs_api"):
            raise ValueError(f"unknown source {self.source!r}")
        if not self.start < self.end:
            raise ValueError("start must precede end")
        if self.page_days < 1:
            raise ValueError("page_days must be >= 1")

    def windows(self) -> list[tuple[datetime, datetime]]:
        """[start, end) split into page-sized windows (ceiling division)."""
        out = []
        cursor = self.start
        step = timedelta(days=self.page_days)
        while cursor < self.end:
            out.append((cursor, min(cursor + step, self.end)))
            cursor += step
        return out


def _load_manifest(path: Path) -> dict:
    if path.exists():
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return {"windows": [], "request_count": 0, "retry_count": 0}


def _save_manifest(path: Path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _request_with_retry(session, url, params, limiter, clock, manifest) -> Optional[object]:
    """GET with rate limiting and backoff. Returns the response, or None
    after exhausting retries on transient failures. Credential failures
    raise immediately."""
    delay = BACKOFF_BASE_S
    for attempt in range(1, MAX_ATTEMPTS + 1):
        limiter.acquire()
        manifest["request_count"] += 1
        try:
            response = session.get(url, params=params, timeout=60)
        except requests.RequestException:
            response = None
        if response is not None:
            if response.status_code in (401, 403):
                raise CredentialError(f"credentials rejected ({response.status_code}) for {url}")
            if response.status_code == 200:
                return response
            if response.status_code not in RETRYABLE_STATUS:
                return None
        if attempt < MAX_ATTEMPTS:
            manifest["retry_count"] += 1
            clock.sleep(delay)
            delay *= BACKOFF_FACTOR
    return None


_SENSOR_FIELD_MAP = {
    "pm2.5_cf_1_a": "pm25_cf1_a",
    "pm2.5_cf_1_b": "pm25_cf1_b",
    "pm2.5_atm_a": "pm25_atm_a",
    "pm2.5_atm_b": "pm25_atm_b",
    "temperature": "temp",
    "humidity": "rh",
}

RAW_HEADER = ["sensor_id", "timestamp", "pm25_cf1_a", "pm25_cf1_b",
              "pm25_atm_a", "pm25_atm_b", "temp", "rh"]


def _window_key(sensor_id: str, w_start: datetime, w_end: datetime) -> str:
    return f"{sensor_id}|{format_timestamp_utc(w_start)}|{format_timestamp_utc(w_end)}"


def fetch_sensor_history(
    job: FetchJob,
    api_key: str,
    out_dir,
    session=None,
    clock=None,
) -> dict:
    """Fetch raw 15-minute history for each sensor, one CSV per sensor per
    window, mapped into the raw ingest schema. Values are written verbatim
    (temperature stays Fahrenheit; the manifest records temp_unit so the
    parse schema can declare it). Windows already marked complete in an
    existing manifest are skipped. Sensors whose windows keep failing are
    recorded under gaps and the job continues."""
    if not api_key:
        raise CredentialError("missing sensor API key")
    clock = clock or SystemClock()
    session = session or requests.Session()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    manifest = _load_manifest(manifest_path)
    manifest.setdefault("source", job.source)
    manifest["temp_unit"] = "F"
    done = {w["key"] for w in manifest["windows"] if w["status"] == "complete"}
    limiter = RateLimiter(job.rate_limit_per_min, clock)
    base = job.base_url or SENSOR_API_URL

    for sensor_id in job.ids:
        for w_start, w_end in job.windows():
            key = _window_key(sensor_id, w_start, w_end)
            if key in done:
                continue
            params = {
                "api_key": api_key,
                "start_timestamp": int(w_start.timestamp()),
                "end_timestamp": int(w_end.timestamp()),
                "fields": ",".join(_SENSOR_FIELD_MAP),
            }
            response = _request_with_retry(
                session, f"{base}/sensors/{sensor_id}/history", params, limiter, clock, manifest
            )
            entry = {"key": key, "sensor_id": sensor_id,
                     "start": format_timestamp_utc(w_start), "end": format_timestamp_utc(w_end)}
            if response is None:
                entry.update({"status": "incomplete", "file": None, "rows": 0})
            else:
                file_name = (
                    f"{sensor_id}_{w_start.strftime('%Y%m%dT%H%M%SZ')}"
                    f"_{w_end.strftime('%Y%m%dT%H%M%SZ')}.csv"
                )
                rows = _write_sensor_window(sensor_id, response.text, out_dir / file_name)
                entry.update({"status": "complete", "file": file_name, "rows": rows})
            manifest["windows"] = [w for w in manifest["windows"] if w["key"] != key]
            manifest["windows"].append(entry)
            _save_manifest(manifest_path, manifest)

    manifest["windows"].sort(key=lambda w: w["key"])
    manifest["gaps"] = [w["key"] for w in manifest["windows"] if w["status"] != "complete"]
    _save_manifest(manifest_path, manifest)
    return manifest


def _write_sensor_window(sensor_id: str, body: str, path: Path) -> int:
    reader = csv.DictReader(io.StringIO(body))
    rows = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RAW_HEADER)
        for rec in sorted(reader, key=lambda r: r.get("time_stamp", "")):
            stamp = datetime.fromtimestamp(int(rec["time_stamp"]), tz=timezone.utc)
            writer.writerow(
                [sensor_id, format_timestamp_utc(stamp)]
                + [rec.get(src, "") for src in _SENSOR_FIELD_MAP]
            )
            rows += 1
    return rows


def fetch_reference_hourly(
    job: FetchJob,
    email: str,
    key: str,
    out_dir,
    session=None,
    clock=None,
) -> dict:
    """Fetch regulatory hourly PM2.5 for each site into one reference CSV
    (site_id,hour,pm25_ref,method_code). Rows are written verbatim:
    negative concentrations survive (collocation filters them) and
    method_code is preserved exactly so mid-period method changes remain
    distinct monitor identities. Pagination per window ends on an empty
    page."""
    if not email or not key:
        raise CredentialError("missing AQS credentials")
    clock = clock or SystemClock()
    session = session or requests.Session()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    manifest = _load_manifest(manifest_path)
    manifest.setdefault("source", job.source)
    done = {w["key"] for w in manifest["windows"] if w["status"] == "complete"}
    limiter = RateLimiter(job.rate_limit_per_min, clock)
    base = job.base_url or AQS_API_URL
    csv_path = out_dir / "reference.csv"
    if not csv_path.exists():
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh).writerow(["site_id", "hour", "pm25_ref", "method_code"])

    for site_id in job.ids:
        for w_start, w_end in job.windows():
            key_id = _window_key(site_id, w_start, w_end)
            if key_id in done:
                continue
            rows = []
            page = 1
            failed = False
            while True:
                params = {
                    "email": email,
                    "key": key,
                    "site": site_id,
                    "bdate": w_start.strftime("%Y%m%d"),
                    "edate": w_end.strftime("%Y%m%d"),
                    "page": page,
                }
                response = _request_with_retry(
                    session, f"{base}/sampleData/bySite", params, limiter, clock, manifest
                )
                if response is None:
                    failed = True
                    break
                data = response.json().get("Data", [])
                if not data:
                    break
                rows.extend(data)
                page += 1
            entry = {"key": key_id, "site_id": site_id,
                     "start": format_timestamp_utc(w_start), "end": format_timestamp_utc(w_end)}
            if failed:
                entry.update({"status": "incomplete", "rows": 0})
            else:
                with open(csv_path, "a", encoding="utf-8", newline="") as fh:
                    writer = csv.writer(fh)
                    for rec in rows:
                        stamp = parse_timestamp_utc(f"{rec['date_gmt']}T{rec['time_gmt']}:00Z")
                        writer.writerow(
                            [rec["site_id"], format_timestamp_utc(stamp),
                             rec["sample_measurement"], rec["method_code"]]
                        )
                entry.update({"status": "complete", "rows": len(rows)})
            manifest["windows"] = [w for w in manifest["windows"] if w["key"] != key_id]
            manifest["windows"].append(entry)
            _save_manifest(manifest_path, manifest)

    manifest["windows"].sort(key=lambda w: w["key"])
    manifest["gaps"] = [w["key"] for w in manifest["windows"] if w["status"] != "complete"]
    _save_manifest(manifest_path, manifest)
    return manifest
