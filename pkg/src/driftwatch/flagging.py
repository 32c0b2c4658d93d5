"""Dual-channel disagreement flagging.

A record is flagged when the two channels differ by more than an absolute
threshold (default 5 ug/m3) AND their percent difference, 2|A-B|/(A+B),
exceeds that sensor's percentile cutoff. Both inequalities are strict.
The percentile is chosen by a grid search that compares unflagged data
against collocated reference measurements.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from . import stats

DEFAULT_ABS_THRESHOLD = 5.0
DEFAULT_PERCENTILE = 0.85
DEFAULT_GRID_STEP = 0.01


@dataclass
class FlagRule:
    """The flag rule: absolute threshold plus per-sensor percent-difference
    cutoffs taken at percentile_x of each sensor's own distribution."""

    abs_threshold: float
    percentile_x: float
    per_sensor_cutoff: dict[str, float]


@dataclass
class AgreementMetrics:
    pearson_r: float
    rmse: float
    nrmse: Optional[float]  # None when the reference series has no variance
    n: int


@dataclass
class SweepResult:
    """Grid-search diagnostics: one row per percentile with pooled
    agreement metrics over unflagged rows, plus the selected percentile
    (lowest nRMSE, ties broken toward the larger percentile) and the
    highest-correlation percentile reported alongside."""

    rows: pd.DataFrame  # columns: x, r, nrmse, pct_flagged
    selected_x: float
    selected_x_by_r: float
    per_pair: dict[str, AgreementMetrics] = field(default_factory=dict)


def percent_difference(a, b):
    """Unitless percent difference 2|a-b|/(a+b), defined as 0 when a+b = 0
    (both channels zero). Works elementwise on arrays; range is [0, 2] for
    nonnegative inputs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    total = a + b
    with np.errstate(divide="ignore", invalid="ignore"):
        pd_vals = np.where(total != 0, 2.0 * np.abs(a - b) / total, 0.0)
    if pd_vals.ndim == 0:
        return float(pd_vals)
    return pd_vals


def _dual_channel_mask(df: pd.DataFrame) -> pd.Series:
    return df["pm25_cf1_a"].notna() & df["pm25_cf1_b"].notna()


def compute_per_sensor_cutoffs(
    hourly: pd.DataFrame, percentile_x: float
) -> tuple[dict[str, float], list[str]]:
    """Per-sensor percent-difference cutoff at percentile_x (linear
    interpolation between order statistics). Only rows with both channels
    present contribute. Sensors with no such rows are excluded from the
    map and returned in the second element."""
    if not 0.0 <= percentile_x <= 0.99:
        raise ValueError(f"percentile_x must be in [0, 0.99], got {percentile_x}")
    cutoffs: dict[str, float] = {}
    excluded: list[str] = []
    valid = hourly[_dual_channel_mask(hourly)]
    pdiff = percent_difference(valid["pm25_cf1_a"].to_numpy(), valid["pm25_cf1_b"].to_numpy())
    groups = pd.Series(pdiff, index=valid["sensor_id"].to_numpy()).groupby(level=0)
    per_sensor = {sid: grp.to_numpy() for sid, grp in groups}
    for sensor_id in sorted(pd.unique(hourly["sensor_id"])):
        values = per_sensor.get(sensor_id)
        if values is None or len(values) == 0:
            excluded.append(sensor_id)
            continue
        cutoffs[sensor_id] = stats.quantile(values, percentile_x)
    return cutoffs, excluded


def build_flag_rule(
    hourly: pd.DataFrame,
    percentile_x: float = DEFAULT_PERCENTILE,
    abs_threshold: float = DEFAULT_ABS_THRESHOLD,
) -> FlagRule:
    cutoffs, _ = compute_per_sensor_cutoffs(hourly, percentile_x)
    return FlagRule(abs_threshold=abs_threshold, percentile_x=percentile_x, per_sensor_cutoff=cutoffs)


def apply_flags(hourly: pd.DataFrame, rule: FlagRule) -> pd.DataFrame:
    """Return a copy of hourly with an integer flag column (1 = channels
    disagree under the rule). Rows missing either channel cannot exhibit
    disagreement and get flag 0. Every sensor contributing a dual-channel
    row must have a cutoff; otherwise a ValueError names the sensor."""
    out = hourly.copy()
    dual = _dual_channel_mask(out)
    sensors_needing_cutoff = pd.unique(out.loc[dual, "sensor_id"])
    missing = [s for s in sensors_needing_cutoff if s not in rule.per_sensor_cutoff]
    if missing:
        raise ValueError(f"no percent-difference cutoff for sensor(s): {sorted(missing)}")

    flag = np.zeros(len(out), dtype=np.int8)
    if dual.any():
        a = out.loc[dual, "pm25_cf1_a"].to_numpy(dtype=float)
        b = out.loc[dual, "pm25_cf1_b"].to_numpy(dtype=float)
        delta = np.abs(a - b)
        pdiff = percent_difference(a, b)
        cut = out.loc[dual, "sensor_id"].map(rule.per_sensor_cutoff).to_numpy(dtype=float)
        flag[dual.to_numpy()] = ((delta > rule.abs_threshold) & (pdiff > cut)).astype(np.int8)
    out["flag"] = flag
    return out


def agreement_metrics(pred, ref) -> AgreementMetrics:
    """Pearson r, RMSE, and RMSE normalized by the sample standard deviation
    of the reference series. nrmse is None when the reference has zero
    variance."""
    pred = np.asarray(pred, dtype=float).ravel()
    ref = np.asarray(ref, dtype=float).ravel()
    if pred.size != ref.size:
        raise ValueError("pred and ref must have equal length")
    if pred.size < 2:
        raise ValueError("need at least 2 paired observations")
    rmse = float(np.sqrt(np.mean((pred - ref) ** 2)))
    ref_sd = float(np.std(ref, ddof=1))
    nrmse = rmse / ref_sd if ref_sd > 0 else None
    try:
        r = stats.pearson_r(pred, ref)
    except stats.DegenerateInputError:
        r = float("nan")
    return AgreementMetrics(pearson_r=r, rmse=rmse, nrmse=nrmse, n=int(pred.size))


def default_grid(step: float = DEFAULT_GRID_STEP) -> np.ndarray:
    """Percentile grid 0.00 .. 0.99 in the given step."""
    grid = np.round(np.arange(0.0, 0.99 + 1e-9, step), 10)
    return grid[grid <= 0.99]


def sweep_percentiles(
    pairs: Iterable,
    grid=None,
    abs_threshold: float = DEFAULT_ABS_THRESHOLD,
) -> SweepResult:
    """Grid-search the flag percentile against collocated reference data.

    For each grid percentile x: per-sensor cutoffs are computed on the
    pooled merged rows, the rule is applied, flagged rows are dropped, and
    Pearson r / nRMSE between the remaining combined-channel means and the
    reference are evaluated over all pairs pooled. Grid points where fewer
    than 2 rows survive (or the surviving reference has no variance) get
    null metrics and are excluded from selection.

    Selection: lowest nRMSE, ties resolved toward the larger x (fewer
    exclusions). The highest-R percentile is reported alongside, with the
    same tie rule. Per-pair metrics at the selected percentile are attached
    for diagnostics.
    """
    if grid is None:
        grid = default_grid()
    grid = np.asarray(sorted(grid), dtype=float)
    pair_list = list(pairs)
    frames = []
    for p in pair_list:
        sub = p.merged[["pm25_cf1_mean", "pm25_cf1_a", "pm25_cf1_b", "pm25_ref"]].copy()
        sub["sensor_id"] = p.sensor_id
        sub["pair_key"] = f"{p.sensor_id}|{p.monitor_id}"
        frames.append(sub)
    if not frames:
        raise ValueError("no collocation pairs supplied")
    pooled = pd.concat(frames, ignore_index=True)
    if len(pooled) == 0:
        raise ValueError("collocation pairs contain no merged rows")

    a = pooled["pm25_cf1_a"].to_numpy(dtype=float)
    b = pooled["pm25_cf1_b"].to_numpy(dtype=float)
    pred = pooled["pm25_cf1_mean"].to_numpy(dtype=float)
    ref = pooled["pm25_ref"].to_numpy(dtype=float)
    delta = np.abs(a - b)
    pdiff = percent_difference(a, b)

    sensor_codes, sensor_index = pd.factorize(pooled["sensor_id"], sort=True)
    n_sensors = len(sensor_index)
    cutoff_matrix = np.empty((n_sensors, grid.size))
    for i, sensor in enumerate(sensor_index):
        vals = pdiff[sensor_codes == i]
        cutoff_matrix[i, :] = np.quantile(vals, grid)  # linear interpolation

    delta_exceeds = delta > abs_threshold
    n_total = len(pooled)
    rows = []
    flag_masks = {}
    for j, x in enumerate(grid):
        row_cut = cutoff_matrix[sensor_codes, j]
        flagged = delta_exceeds & (pdiff > row_cut)
        flag_masks[float(x)] = flagged
        keep = ~flagged
        n_keep = int(keep.sum())
        pct_flagged = 100.0 * (n_total - n_keep) / n_total
        if n_keep < 2:
            rows.append({"x": float(x), "r": np.nan, "nrmse": np.nan, "pct_flagged": pct_flagged})
            continue
        m = agreement_metrics(pred[keep], ref[keep])
        rows.append(
            {
                "x": float(x),
                "r": m.pearson_r,
                "nrmse": np.nan if m.nrmse is None else m.nrmse,
                "pct_flagged": pct_flagged,
            }
        )
    table = pd.DataFrame(rows, columns=["x", "r", "nrmse", "pct_flagged"])

    valid = table["nrmse"].notna()
    if not valid.any():
        raise ValueError("no grid point yielded computable agreement metrics")
    best_nrmse = table.loc[valid, "nrmse"].min()
    selected_x = float(table.loc[valid & (table["nrmse"] == best_nrmse), "x"].max())
    valid_r = table["r"].notna()
    best_r = table.loc[valid_r, "r"].max()
    selected_x_by_r = float(table.loc[valid_r & (table["r"] == best_r), "x"].max())

    per_pair: dict[str, AgreementMetrics] = {}
    keep = ~flag_masks[selected_x]
    for key, grp in pooled.groupby("pair_key", sort=True):
        idx = grp.index.to_numpy()
        kept_idx = idx[keep[idx]]
        if kept_idx.size >= 2:
            per_pair[key] = agreement_metrics(pred[kept_idx], ref[kept_idx])

    return SweepResult(
        rows=table, selected_x=selected_x, selected_x_by_r=selected_x_by_r, per_pair=per_pair
    )
