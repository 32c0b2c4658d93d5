"""Degradation outcomes built on the flag indicator: per-sensor forward
cumulative flag means, permanent-degradation classification, fleet flag
rates by operational hour, flagged-vs-unflagged condition contrasts, and
cumulative high-concentration exposure counts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import pandas as pd

from . import stats

DEFAULT_DEGRADED_THRESHOLD = 0.4
DEFAULT_MIN_HOURS = 100
DEFAULT_EXCEEDANCE_THRESHOLDS = (50.0, 100.0, 500.0)
CONTRAST_VARIABLES = ("pm25_cf1_mean", "rh_mean", "temp_mean")


@dataclass
class DegradationProfile:
    """Per-sensor flag history on the operational-hour axis, with the
    forward (suffix) cumulative mean of the flag at every hour."""

    sensor_id: str
    op_hour: np.ndarray
    flag: np.ndarray
    forward_mean: np.ndarray
    permanently_degraded: bool = False
    qualifying_hours: int = 0


@dataclass
class GroupSummary:
    n: int
    minimum: float
    maximum: float
    mean: float
    median: float
    q1: float
    q3: float

    def to_dict(self) -> dict:
        return {
            "n": self.n, "min": self.minimum, "max": self.maximum,
            "mean": self.mean, "median": self.median, "q1": self.q1, "q3": self.q3,
        }


@dataclass
class ConditionContrast:
    """Summary statistics and Welch t-tests comparing flagged against
    unflagged records, plus monthly flagged counts/percentages."""

    variables: dict[str, dict] = field(default_factory=dict)
    monthly: dict[int, dict] = field(default_factory=dict)
    n_flagged: int = 0
    n_unflagged: int = 0

    def to_dict(self) -> dict:
        return {
            "n_flagged": self.n_flagged,
            "n_unflagged": self.n_unflagged,
            "variables": self.variables,
            "monthly": {str(k): v for k, v in sorted(self.monthly.items())},
        }


@dataclass
class ExposureSeries:
    """Running counts of hourly means strictly exceeding each threshold."""

    sensor_id: str
    op_hour: np.ndarray
    counts: dict[float, np.ndarray]


def forward_cumulative_mean(flags) -> np.ndarray:
    """Suffix means of a 0/1 series: m_i = mean(f_i .. f_n), computed in a
    single reverse pass over the running suffix sum (for integer flags the
    sums are exact, so each m_i matches a direct mean of the tail bit for
    bit). Empty input gives an empty array."""
    f = np.asarray(flags, dtype=float).ravel()
    if f.size == 0:
        return np.array([])
    suffix_sums = np.cumsum(f[::-1])[::-1]
    counts = np.arange(f.size, 0, -1, dtype=float)
    return suffix_sums / counts


def build_profile(sensor_id: str, op_hour, flags) -> DegradationProfile:
    op_hour = np.asarray(op_hour)
    flags = np.asarray(flags, dtype=np.int8)
    order = np.argsort(op_hour, kind="stable")
    op_hour = op_hour[order]
    flags = flags[order]
    if np.unique(op_hour).size != op_hour.size:
        raise ValueError(f"duplicate operational hours for sensor {sensor_id!r}")
    return DegradationProfile(
        sensor_id=sensor_id,
        op_hour=op_hour,
        flag=flags,
        forward_mean=forward_cumulative_mean(flags),
    )


def classify_permanent(
    profile: DegradationProfile,
    threshold: float = DEFAULT_DEGRADED_THRESHOLD,
    min_hours: int = DEFAULT_MIN_HOURS,
) -> tuple[bool, int]:
    """A sensor is permanently degraded when its forward cumulative flag
    mean is >= threshold at min_hours or more operational hours (hours with
    data; the qualifying hours need not be consecutive). Returns the verdict
    and the qualifying-hour count, and records both on the profile."""
    qualifying = int(np.sum(profile.forward_mean >= threshold))
    degraded = qualifying >= min_hours
    profile.permanently_degraded = degraded
    profile.qualifying_hours = qualifying
    return degraded, qualifying


def fleet_profiles(
    flagged: pd.DataFrame,
    threshold: float = DEFAULT_DEGRADED_THRESHOLD,
    min_hours: int = DEFAULT_MIN_HOURS,
) -> list[DegradationProfile]:
    """Build and classify one profile per sensor from a flagged hourly
    frame carrying sensor_id, op_hour, and flag columns."""
    profiles = []
    for sensor_id, grp in flagged.groupby("sensor_id", sort=True):
        profile = build_profile(sensor_id, grp["op_hour"].to_numpy(), grp["flag"].to_numpy())
        classify_permanent(profile, threshold=threshold, min_hours=min_hours)
        profiles.append(profile)
    return profiles


def flag_rate_by_op_hour(flagged: pd.DataFrame) -> pd.DataFrame:
    """Fleet flag percentage at each operational hour, the cumulative
    percentage over all records up to that hour, and the number of
    measurements contributing at each hour."""
    grouped = flagged.groupby("op_hour", sort=True)["flag"].agg(["mean", "count", "sum"])
    out = pd.DataFrame(
        {
            "op_hour": grouped.index.to_numpy(),
            "pct_flagged": 100.0 * grouped["mean"].to_numpy(),
            "n_measurements": grouped["count"].to_numpy(),
        }
    )
    cum_flags = grouped["sum"].cumsum().to_numpy(dtype=float)
    cum_n = grouped["count"].cumsum().to_numpy(dtype=float)
    out["pct_cumulative_flagged"] = 100.0 * cum_flags / cum_n
    return out[["op_hour", "pct_flagged", "pct_cumulative_flagged", "n_measurements"]]


def _summarize(values: np.ndarray) -> GroupSummary:
    return GroupSummary(
        n=int(values.size),
        minimum=float(values.min()),
        maximum=float(values.max()),
        mean=float(values.mean()),
        median=float(np.median(values)),
        q1=stats.quantile(values, 0.25),
        q3=stats.quantile(values, 0.75),
    )


def condition_contrast(flagged: pd.DataFrame) -> ConditionContrast:
    """Contrast measurement conditions for flagged vs unflagged records.

    For each of the combined PM mean, RH and temperature: per-group summary
    statistics and a Welch two-sample t-test. Monthly entries count flagged
    and unflagged records per calendar month with the flagged percentage.
    When a group is empty the other group is still summarized and the tests
    are null."""
    result = ConditionContrast()
    is_flagged = flagged["flag"].astype(bool)
    result.n_flagged = int(is_flagged.sum())
    result.n_unflagged = int((~is_flagged).sum())
    for var in CONTRAST_VARIABLES:
        values = flagged[var]
        fl = values[is_flagged & values.notna()].to_numpy(dtype=float)
        un = values[~is_flagged & values.notna()].to_numpy(dtype=float)
        entry: dict = {
            "flagged": _summarize(fl).to_dict() if fl.size else None,
            "unflagged": _summarize(un).to_dict() if un.size else None,
            "welch_t": None,
            "welch_df": None,
            "p_value": None,
        }
        if fl.size >= 2 and un.size >= 2:
            t, df, p = stats.welch_t(fl, un)
            entry.update({"welch_t": t, "welch_df": df, "p_value": p})
        result.variables[var] = entry
    months = flagged["hour"].map(lambda dt: dt.month)
    for month, grp in flagged.groupby(months.to_numpy()):
        n_fl = int(grp["flag"].astype(bool).sum())
        n_total = len(grp)
        result.monthly[int(month)] = {
            "flagged": n_fl,
            "unflagged": n_total - n_fl,
            "pct_flagged": 100.0 * n_fl / n_total if n_total else 0.0,
        }
    return result


def cumulative_exceedances(
    sensor_id: str,
    op_hour,
    pm25,
    thresholds: Iterable[float] = DEFAULT_EXCEEDANCE_THRESHOLDS,
) -> ExposureSeries:
    """Running counts of hourly values strictly above each threshold, on
    the sensor's operational-hour axis."""
    op_hour = np.asarray(op_hour)
    pm25 = np.asarray(pm25, dtype=float)
    order = np.argsort(op_hour, kind="stable")
    op_hour = op_hour[order]
    pm25 = pm25[order]
    counts = {
        float(th): np.cumsum(pm25 > th).astype(int) for th in thresholds
    }
    return ExposureSeries(sensor_id=sensor_id, op_hour=op_hour, counts=counts)


def exceedance_frame(
    hourly: pd.DataFrame, thresholds: Iterable[float] = DEFAULT_EXCEEDANCE_THRESHOLDS
) -> pd.DataFrame:
    """Per-sensor cumulative exceedance counts as columns n_over_<t>
    alongside sensor_id and op_hour, for joining onto error rows."""
    thresholds = [float(t) for t in thresholds]
    frames = []
    for sensor_id, grp in hourly.groupby("sensor_id", sort=True):
        series = cumulative_exceedances(
            sensor_id, grp["op_hour"].to_numpy(), grp["pm25_cf1_mean"].to_numpy(), thresholds
        )
        frame = pd.DataFrame({"sensor_id": sensor_id, "op_hour": series.op_hour})
        for th in thresholds:
            frame[f"n_over_{th:g}"] = series.counts[th]
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["sensor_id", "op_hour"] + [f"n_over_{t:g}" for t in thresholds])
    return pd.concat(frames, ignore_index=True)
