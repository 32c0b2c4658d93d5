"""Stage orchestration: wires the ingestion, collocation, flagging,
degradation, correction and trend modules together, reads/writes the
documented file formats, and drives the full `report` chain.

Everything here is deterministic for fixed inputs and seed: artifact
files contain no timestamps or machine-specific content, so re-running a
stage on the same inputs reproduces its outputs byte for byte.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from . import collocation, correction, degradation, flagging, ingest, synthfleet, trend
from .config import PipelineConfig


@dataclass
class IngestResult:
    hourly: list
    qc_report: ingest.QcReport
    parse_report: ingest.ParseReport
    meta: dict[str, ingest.SensorMeta]
    deploy_start: dict  # sensor_id -> first retained timestamp


def _parse_many(paths, schema, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda p: ingest.parse_raw(p, schema), paths))
    return [ingest.parse_raw(p, schema) for p in paths]


def run_ingest(
    raw_paths,
    meta_path,
    zones_path,
    config: PipelineConfig,
) -> IngestResult:
    """Parse raw files, QC, aggregate to hourly, and enrich metadata with
    deploy starts and climate zones. Burn-in is NOT trimmed here; trend
    fitting applies its own trim."""
    schema = ingest.RawSchema(temp_unit=config.temp_unit)
    raw_paths = sorted(Path(p) for p in raw_paths)
    parse_report = ingest.ParseReport()
    records = []
    for recs, rep in _parse_many(raw_paths, schema, config.threads):
        records.extend(recs)
        for attr in ("rows_read", "rows_parsed", "bad_rows",
                     "negative_concentration", "bad_timestamp"):
            setattr(parse_report, attr, getattr(parse_report, attr) + getattr(rep, attr))

    retained, qc_report = ingest.qc_filter(
        records,
        channel_max=config.channel_max,
        temp_min=config.temp_min,
        temp_max=config.temp_max,
        rh_max=config.rh_max,
    )
    hourly = ingest.aggregate_hourly(retained, min_subhourly=config.min_subhourly)
    starts = ingest.deploy_starts(retained)

    metas = {m.sensor_id: m for m in ingest.read_sensor_meta(meta_path)}
    for sensor_id, meta in metas.items():
        meta.deploy_start = starts.get(sensor_id)
    if zones_path is not None:
        zones_path = Path(zones_path)
        if zones_path.suffix.lower() in (".json", ".geojson"):
            zones = ingest.load_zone_polygons(zones_path)
        else:
            zones = ingest.load_zone_table(zones_path)
        for meta in metas.values():
            ingest.assign_climate_zone(meta, zones)
    return IngestResult(
        hourly=hourly,
        qc_report=qc_report,
        parse_report=parse_report,
        meta=metas,
        deploy_start=starts,
    )


def write_meta_csv(metas: dict[str, ingest.SensorMeta], path) -> None:
    rows = []
    for sensor_id in sorted(metas):
        m = metas[sensor_id]
        rows.append(
            {
                "sensor_id": m.sensor_id,
                "lat": m.latitude,
                "lon": m.longitude,
                "location": m.location,
                "deploy_start": (
                    ingest.format_timestamp_utc(m.deploy_start) if m.deploy_start else ""
                ),
                "climate_zone": m.climate_zone,
            }
        )
    pd.DataFrame(
        rows, columns=["sensor_id", "lat", "lon", "location", "deploy_start", "climate_zone"]
    ).to_csv(path, index=False)


def run_collocate(
    hourly_df: pd.DataFrame,
    metas: dict[str, ingest.SensorMeta],
    sites_path,
    reference_path,
    config: PipelineConfig,
) -> list[collocation.CollocationPair]:
    sites = collocation.read_monitor_sites(sites_path)
    reference = collocation.read_reference_csv(reference_path)
    matches = collocation.match_sensors(metas.values(), sites, radius_m=config.radius_m)
    chosen = collocation.select_monitors_per_sensor(matches)
    return [
        collocation.merge_pairs(match, hourly_df, reference)
        for _, match in sorted(chosen.items())
    ]


def with_op_hours(df: pd.DataFrame, starts: dict) -> pd.DataFrame:
    """Attach the operational-hour column (hours since each sensor's
    deploy start)."""
    out = df.reset_index(drop=True)
    deltas = np.empty(len(out), dtype=int)
    for sensor_id, grp in out.groupby("sensor_id"):
        start = starts.get(sensor_id)
        if start is None:
            raise ValueError(f"no deploy start known for sensor {sensor_id!r}")
        deltas[grp.index.to_numpy()] = ingest.op_hours(grp["hour"], start).to_numpy()
    out["op_hour"] = deltas
    return out


def trim_first_hours(df: pd.DataFrame, n_hours: int) -> pd.DataFrame:
    """Drop each sensor's first n_hours rows in hour order (the frame
    analog of the burn-in trim)."""
    if n_hours <= 0:
        return df
    kept = []
    for _, grp in df.groupby("sensor_id", sort=True):
        kept.append(grp.sort_values("hour").iloc[n_hours:])
    if not kept:
        return df.iloc[0:0]
    return pd.concat(kept, ignore_index=True)


def burn_in_cutoff_hours(hourly: pd.DataFrame, n_hours: int) -> dict:
    """Each sensor's first hour stamp after its burn-in window (the
    n_hours-th data hour). Sensors with fewer hours map to None (all
    their rows fall inside the window)."""
    cutoffs: dict = {}
    for sensor_id, grp in hourly.groupby("sensor_id", sort=True):
        hours = grp["hour"].sort_values().to_numpy()
        cutoffs[sensor_id] = hours[n_hours] if len(hours) > n_hours else None
    return cutoffs


def drop_burn_in_rows(df: pd.DataFrame, hourly: pd.DataFrame, n_hours: int) -> pd.DataFrame:
    """Remove rows falling inside each sensor's burn-in window, judged
    against the sensor's full hourly series (df may cover only a subset of
    hours, e.g. collocated error rows)."""
    if n_hours <= 0 or df.empty:
        return df
    cutoffs = burn_in_cutoff_hours(hourly, n_hours)
    out = df.reset_index(drop=True)
    keep = np.zeros(len(out), dtype=bool)
    for sensor_id, grp in out.groupby("sensor_id"):
        cutoff = cutoffs.get(sensor_id)
        if cutoff is not None:
            keep[grp.index.to_numpy()] = (grp["hour"] >= cutoff).to_numpy()
    return out[keep].reset_index(drop=True)


@dataclass
class ReportPaths:
    out_dir: Path
    artifacts: list[dict] = field(default_factory=list)

    def register(self, name: str, rel_path: str, kind: str) -> Path:
        self.artifacts.append({"name": name, "path": rel_path, "kind": kind})
        path = self.out_dir / rel_path
        path.parent.mkdir(parents=True, exist_ok=True)
        return path


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _trend_row(fit: trend.TrendFit, strata: str) -> dict:
    return {
        "outcome": fit.outcome,
        "strata": strata,
        "stratum": fit.stratum,
        "n": fit.n,
        "intercept": fit.intercept,
        "slope_per_hour": fit.slope_per_hour,
        "slope_per_year": fit.slope_per_year,
        "ci_low_per_year": fit.ci_low_per_year,
        "ci_high_per_year": fit.ci_high_per_year,
        "p_value": fit.p_value,
    }


def _gam_doc(fit: trend.GamFit, outcome: str) -> dict:
    doc = {
        "outcome": outcome,
        "basis_size": fit.basis.basis_size,
        "degree": fit.basis.degree,
        "penalty_order": fit.penalty_order,
        "knots": [float(k) for k in fit.basis.knots],
        "lambda": fit.lam,
        "edf": fit.edf,
        "gcv": fit.gcv,
        "n": fit.n,
        "grid": [float(g) for g in fit.grid],
        "curve": [float(c) for c in fit.curve],
    }
    if fit.bands is not None:
        doc["bands"] = {
            "lower": [float(v) for v in fit.bands.lower],
            "upper": [float(v) for v in fit.bands.upper],
            "median": [float(v) for v in fit.bands.median],
            "replicates_used": fit.bands.replicates_used,
            "replicates_dropped": fit.bands.replicates_dropped,
            "high_drop_warning": fit.bands.high_drop_warning,
        }
    return doc


def run_report(config: PipelineConfig, out_dir) -> dict:
    """Run the full chain on the configured inputs and emit every figure
    and table analog as CSV/JSON, plus a manifest of the artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = ReportPaths(out_dir)

    # --- inputs -----------------------------------------------------------
    if config.input_dir is not None:
        input_dir = Path(config.input_dir)
    elif config.scenario is not None:
        input_dir = out_dir / "inputs"
        synthfleet.generate(synthfleet.ScenarioConfig.from_dict(config.scenario), input_dir)
    else:
        raise ValueError("config must provide input_dir or scenario")
    raw_paths = sorted((input_dir / "raw").glob("*.csv"))
    if not raw_paths:
        raise FileNotFoundError(f"no raw CSV files under {input_dir / 'raw'}")

    # --- ingest -----------------------------------------------------------
    ing = run_ingest(raw_paths, input_dir / "meta.csv", _zones_path(input_dir), config)
    hourly_df = ingest.hourly_frame(ing.hourly)
    ingest.write_hourly_csv(ing.hourly, paths.register("hourly_records", "hourly.csv", "csv"))
    _write_json(
        paths.register("qc_report", "qc_report.json", "json"),
        {"qc": ing.qc_report.to_dict(), "parse": ing.parse_report.to_dict()},
    )
    write_meta_csv(ing.meta, paths.register("sensor_meta", "sensor_meta.csv", "csv"))

    # --- collocation ------------------------------------------------------
    pairs = run_collocate(
        hourly_df, ing.meta, input_dir / "sites.csv", input_dir / "reference.csv", config
    )
    collocation.write_pair_manifest(pairs, paths.register("collocation_pairs", "pairs.csv", "csv"))
    for pair in pairs:
        rel = f"merged/{pair.sensor_id}__{pair.monitor_id.replace('|', '_')}.csv"
        collocation.write_merged_csv(pair, paths.register(f"merged_{pair.sensor_id}", rel, "csv"))

    # --- percentile sweep (figure: agreement vs threshold) -----------------
    sweep = flagging.sweep_percentiles(
        pairs, grid=flagging.default_grid(config.grid_step), abs_threshold=config.abs_threshold
    )
    sweep.rows.to_csv(paths.register("flag_sweep", "sweep.csv", "csv"), index=False)
    _write_json(
        paths.register("flag_sweep_selection", "sweep_selection.json", "json"),
        {
            "selected_x": sweep.selected_x,
            "selected_x_by_r": sweep.selected_x_by_r,
            "per_pair": {
                k: {"pearson_r": m.pearson_r, "rmse": m.rmse, "nrmse": m.nrmse, "n": m.n}
                for k, m in sorted(sweep.per_pair.items())
            },
        },
    )

    # --- fleet flagging ----------------------------------------------------
    percentile = sweep.selected_x if config.use_swept_percentile else config.percentile
    rule = flagging.build_flag_rule(hourly_df, percentile, config.abs_threshold)
    flagged = flagging.apply_flags(hourly_df, rule)
    flagged = with_op_hours(flagged, ing.deploy_start)
    out_flagged = flagged.copy()
    out_flagged["hour"] = out_flagged["hour"].map(ingest.format_timestamp_utc)
    out_flagged.to_csv(paths.register("flagged_hourly", "flagged.csv", "csv"), index=False)

    # --- degradation -------------------------------------------------------
    profiles = degradation.fleet_profiles(
        flagged, threshold=config.degraded_threshold, min_hours=config.degraded_min_hours
    )
    profile_rows = []
    for p in profiles:
        meta = ing.meta.get(p.sensor_id)
        profile_rows.append(
            {
                "sensor_id": p.sensor_id,
                "degraded": int(p.permanently_degraded),
                "qualifying_hours": p.qualifying_hours,
                "lat": meta.latitude if meta else "",
                "lon": meta.longitude if meta else "",
                "climate_zone": meta.climate_zone if meta else "Unknown",
                "location": meta.location if meta else "",
            }
        )
    pd.DataFrame(
        profile_rows,
        columns=["sensor_id", "degraded", "qualifying_hours", "lat", "lon",
                 "climate_zone", "location"],
    ).to_csv(paths.register("degraded_sensors", "degraded_sensors.csv", "csv"), index=False)

    fleet_series = degradation.flag_rate_by_op_hour(flagged)
    fleet_series.to_csv(
        paths.register("flag_rate_by_op_hour", "flag_rate_by_op_hour.csv", "csv"), index=False
    )
    contrast = degradation.condition_contrast(flagged)
    _write_json(
        paths.register("condition_contrast", "condition_contrast.json", "json"),
        contrast.to_dict(),
    )

    # --- correction ---------------------------------------------------------
    merged_all = _pooled_merged(pairs, rule, ing.deploy_start)
    spec = correction.CorrectionModelSpec.by_id(config.correction_model)
    unflagged_rows = merged_all[merged_all["flag"] == 0]
    fit = correction.fit_correction(unflagged_rows, spec)
    fit_doc = fit.to_dict()
    if config.run_loso and unflagged_rows["sensor_id"].nunique() >= 2:
        loso = correction.loso_cross_validate(unflagged_rows, spec)
        fit_doc["loso"] = loso.to_dict()
    _write_json(paths.register("correction_fit", "correction_fit.json", "json"), fit_doc)

    errors = correction.apply_correction(fit, unflagged_rows)
    out_errors = errors[
        ["sensor_id", "hour", "op_hour", "corrected", "pm25_ref", "error", "norm_error"]
    ].rename(columns={"pm25_ref": "ref"})
    out_errors["hour"] = out_errors["hour"].map(ingest.format_timestamp_utc)
    out_errors.to_csv(
        paths.register("correction_errors", "correction_errors.csv", "csv"), index=False
    )
    error_series = correction.error_by_op_hour(errors)
    error_series.to_csv(
        paths.register("error_by_op_hour", "error_by_op_hour.csv", "csv"), index=False
    )

    # --- trends (burn-in trimmed) -------------------------------------------
    flagged_trend = trim_first_hours(flagged, config.burn_in_hours)
    errors_trend = drop_burn_in_rows(errors, flagged, config.burn_in_hours)
    trends_rows, modification = _trend_tables(flagged_trend, errors_trend, ing.meta, config)
    pd.DataFrame(
        trends_rows,
        columns=["outcome", "strata", "stratum", "n", "intercept", "slope_per_hour",
                 "slope_per_year", "ci_low_per_year", "ci_high_per_year", "p_value"],
    ).to_csv(paths.register("trends", "trends.csv", "csv"), index=False)
    _write_json(
        paths.register("trend_effect_modification", "trend_effect_modification.json", "json"),
        modification,
    )

    interaction_rows = _interaction_tables(flagged, errors_trend, config)
    pd.DataFrame(
        interaction_rows,
        columns=["outcome", "threshold", "term", "coefficient", "ci_low", "ci_high",
                 "p_value", "n"],
    ).to_csv(paths.register("interaction_trends", "interaction_trends.csv", "csv"), index=False)

    # --- GAM with cluster bootstrap ------------------------------------------
    gam_flag = _gam_flag_rate(flagged_trend, config)
    _write_json(
        paths.register("gam_flag_rate", "gam_flag_rate.json", "json"),
        _gam_doc(gam_flag, "pct_flagged"),
    )
    gam_error = _gam_correction_error(unflagged_rows, errors_trend, spec, config)
    _write_json(
        paths.register("gam_correction_error", "gam_correction_error.json", "json"),
        _gam_doc(gam_error, "correction_error"),
    )

    # --- manifest -------------------------------------------------------------
    manifest = {
        "artifacts": sorted(paths.artifacts, key=lambda a: a["name"]),
        "config": config.to_dict(),
        "selected_percentile": percentile,
    }
    _write_json(out_dir / "manifest.json", manifest)
    return manifest


def _zones_path(input_dir: Path) -> Optional[Path]:
    for name in ("zones.csv", "zones.geojson", "zones.json"):
        candidate = input_dir / name
        if candidate.exists():
            return candidate
    return None


def read_meta_csv(path) -> dict[str, ingest.SensorMeta]:
    """Read back the enriched metadata written by write_meta_csv."""
    df = pd.read_csv(path, dtype={"sensor_id": str})
    metas: dict[str, ingest.SensorMeta] = {}
    for row in df.itertuples(index=False):
        deploy = getattr(row, "deploy_start", "")
        metas[row.sensor_id] = ingest.SensorMeta(
            sensor_id=row.sensor_id,
            latitude=float(row.lat),
            longitude=float(row.lon),
            location=row.location,
            deploy_start=(
                ingest.parse_timestamp_utc(deploy) if isinstance(deploy, str) and deploy else None
            ),
            climate_zone=getattr(row, "climate_zone", "Unknown"),
        )
    return metas


def read_flagged_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"sensor_id": str})
    df["hour"] = df["hour"].map(ingest.parse_timestamp_utc)
    return df


def read_errors_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"sensor_id": str})
    df["hour"] = df["hour"].map(ingest.parse_timestamp_utc)
    return df


def read_merged_dir(merged_dir) -> list[collocation.CollocationPair]:
    paths = sorted(Path(merged_dir).glob("*.csv"))
    if not paths:
        raise FileNotFoundError(f"no merged pair CSVs under {merged_dir}")
    return [collocation.read_merged_csv(p) for p in paths]


def _pooled_merged(pairs, rule, starts) -> pd.DataFrame:
    frames = []
    for pair in pairs:
        sub = pair.merged.copy()
        sub.insert(0, "sensor_id", pair.sensor_id)
        frames.append(sub)
    if not frames:
        raise ValueError("no collocated rows; correction stage cannot run")
    merged = pd.concat(frames, ignore_index=True)
    merged = flagging.apply_flags(merged, rule)
    return with_op_hours(merged, starts)


def _trend_tables(flagged_trend, errors_trend, metas, config):
    rows = []
    modification = {}
    hp_year = config.hours_per_year
    weight_col = "n_measurements" if config.weight_trends_by_n else None

    fleet = degradation.flag_rate_by_op_hour(flagged_trend)
    if len(fleet) >= 3 and fleet["op_hour"].nunique() >= 2:
        fit = trend.linear_trend(
            fleet["op_hour"], fleet["pct_flagged"], outcome="pct_flagged",
            stratum="all", hours_per_year=hp_year,
            weights=fleet[weight_col] if weight_col else None,
        )
        rows.append(_trend_row(fit, "all"))

    meta_cols = pd.DataFrame(
        [
            {"sensor_id": m.sensor_id, "location": m.location, "climate_zone": m.climate_zone}
            for m in metas.values()
        ]
    )
    flagged_meta = flagged_trend.merge(meta_cols, on="sensor_id", how="left")

    for strata_name, mask in (
        ("location", pd.Series(True, index=flagged_meta.index)),
        ("climate_zone", flagged_meta["location"] == "outside"),
    ):
        sub = flagged_meta[mask]
        series_frames = []
        for stratum, grp in sub.groupby(strata_name, sort=True):
            series = degradation.flag_rate_by_op_hour(grp)
            series["stratum"] = stratum
            series_frames.append(series)
        if not series_frames:
            continue
        pooled = pd.concat(series_frames, ignore_index=True)
        result = trend.stratified_trends(
            pooled, outcome_col="pct_flagged", stratum_col="stratum",
            outcome="pct_flagged", weight_col=weight_col,
        )
        rows.extend(_trend_row(f, strata_name) for f in result.fits)
        modification.setdefault("pct_flagged", {})[strata_name] = result.interaction_p

    err = errors_trend[errors_trend["error"].notna()]
    if len(err) >= 3 and err["op_hour"].nunique() >= 2:
        cluster_col = "sensor_id" if config.cluster_robust else None
        clusters = err["sensor_id"].to_numpy() if cluster_col else None
        if clusters is not None and pd.unique(clusters).size < 2:
            clusters = None
        fit = trend.linear_trend(
            err["op_hour"], err["error"], outcome="correction_error",
            stratum="all", hours_per_year=hp_year, cluster=clusters,
        )
        rows.append(_trend_row(fit, "all"))
        err_meta = err.merge(meta_cols, on="sensor_id", how="left")
        result = trend.stratified_trends(
            err_meta, outcome_col="error", stratum_col="climate_zone",
            outcome="correction_error", cluster_col=cluster_col,
        )
        rows.extend(_trend_row(f, "climate_zone") for f in result.fits)
        modification.setdefault("correction_error", {})["climate_zone"] = result.interaction_p
    return rows, modification


def _interaction_tables(flagged, errors_trend, config):
    rows = []
    collocated = errors_trend["sensor_id"].unique()
    hourly_coll = flagged[flagged["sensor_id"].isin(collocated)]
    counts = degradation.exceedance_frame(hourly_coll, config.exceedance_thresholds)
    joined = errors_trend.merge(counts, on=["sensor_id", "op_hour"], how="inner")
    for outcome_col in ("error", "norm_error"):
        for threshold in config.exceedance_thresholds:
            count_col = f"n_over_{threshold:g}"
            try:
                fit = trend.interaction_trend(joined, outcome_col, count_col, threshold)
            except ValueError:
                continue
            for i, term in enumerate(trend.InteractionFit.TERM_NAMES):
                rows.append(
                    {
                        "outcome": outcome_col,
                        "threshold": threshold,
                        "term": term,
                        "coefficient": float(fit.coefficients[i]),
                        "ci_low": float(fit.ci_lower[i]),
                        "ci_high": float(fit.ci_upper[i]),
                        "p_value": float(fit.p_values[i]),
                        "n": fit.n,
                    }
                )
    return rows


def _gam_flag_rate(flagged_trend: pd.DataFrame, config: PipelineConfig) -> trend.GamFit:
    series = degradation.flag_rate_by_op_hour(flagged_trend)
    domain = (float(series["op_hour"].min()), float(series["op_hour"].max()))
    fit = trend.fit_pspline_gam(
        series["op_hour"], series["pct_flagged"],
        basis_size=config.basis_size, domain=domain,
    )

    def replicate(sample: pd.DataFrame, rng) -> np.ndarray:
        rep_series = degradation.flag_rate_by_op_hour(sample)
        rep_fit = trend.fit_pspline_gam(
            rep_series["op_hour"], rep_series["pct_flagged"],
            basis_size=config.basis_size, domain=domain,
        )
        return rep_fit.curve

    fit.bands = trend.cluster_bootstrap_bands(
        flagged_trend, replicate, replicates=config.replicates,
        m=config.bootstrap_m, seed=config.seed,
    )
    return fit


def _gam_correction_error(
    unflagged_rows: pd.DataFrame,
    errors_trend: pd.DataFrame,
    spec: correction.CorrectionModelSpec,
    config: PipelineConfig,
) -> trend.GamFit:
    err = errors_trend[errors_trend["error"].notna()]
    domain = (float(err["op_hour"].min()), float(err["op_hour"].max()))
    fit = trend.fit_pspline_gam(
        err["op_hour"], err["error"], basis_size=config.basis_size, domain=domain
    )

    def replicate(sample: pd.DataFrame, rng) -> np.ndarray:
        # Re-run the analysis segment: refit the correction on the sampled
        # sensors, recompute errors, then smooth.
        rep_fit = correction.fit_correction(sample, spec)
        rep_errors = correction.apply_correction(rep_fit, sample)
        rep_err = rep_errors[rep_errors["error"].notna()]
        gam = trend.fit_pspline_gam(
            rep_err["op_hour"], rep_err["error"],
            basis_size=config.basis_size, domain=domain,
        )
        return gam.curve

    # Bootstrap resamples the pre-correction rows so each replicate refits
    # the correction, mirroring the full segment.
    source = unflagged_rows[unflagged_rows["op_hour"].between(domain[0], domain[1])]
    fit.bands = trend.cluster_bootstrap_bands(
        source, replicate, replicates=config.replicates,
        m=config.bootstrap_m, seed=config.seed,
    )
    return fit
