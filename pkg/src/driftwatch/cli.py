"""Subcommand front end for the pipeline.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
malformed inputs). Every analytic output is plot data (CSV/JSON series);
rendering is left to external tools.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import pandas as pd

from . import acquisition, collocation, correction, degradation, flagging, ingest, synthfleet, trend
from .config import PipelineConfig
from .pipeline import (
    drop_burn_in_rows,
    read_errors_csv,
    read_flagged_csv,
    read_merged_dir,
    read_meta_csv,
    run_collocate,
    run_ingest,
    run_report,
    trim_first_hours,
    with_op_hours,
    write_meta_csv,
    _gam_doc,
    _interaction_tables,
    _trend_tables,
)

USAGE_EXIT = 1
DATA_EXIT = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; this CLI reserves 2 for data errors.
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(USAGE_EXIT)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="driftwatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fetch", help="download sensor or regulatory history into pipeline CSVs")
    p.add_argument("--source", required=True, choices=["sensor_api", "aqs_api"])
    p.add_argument("--ids", required=True, help="comma-separated sensor or site ids")
    p.add_argument("--from", dest="start", required=True, help="UTC start, ISO-8601")
    p.add_argument("--to", dest="end", required=True, help="UTC end (exclusive), ISO-8601")
    p.add_argument("--out", required=True)
    p.add_argument("--page-days", type=int, default=5)
    p.add_argument("--rate-limit", type=int, default=60, help="requests per minute")

    p = sub.add_parser("ingest", help="parse raw records, QC, aggregate hourly, enrich metadata")
    p.add_argument("--raw", required=True, nargs="+", help="raw CSV files or a directory")
    p.add_argument("--meta", required=True, help="sensor metadata CSV (sensor_id,lat,lon,location)")
    p.add_argument("--zones", help="sensor_id,zone table or GeoJSON zone polygons")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--temp-unit", choices=["C", "F"], default="C")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("collocate", help="match outdoor sensors to reference monitors and merge")
    p.add_argument("--hourly", required=True)
    p.add_argument("--meta", required=True, help="enriched metadata from the ingest stage")
    p.add_argument("--sites", required=True, help="monitor sites CSV (site_id,lat,lon,method_code)")
    p.add_argument("--reference", required=True, help="reference hourly CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--radius", type=float, default=50.0, help="match radius in meters")

    p = sub.add_parser("flag-sweep", help="grid-search the flag percentile against reference data")
    p.add_argument("--merged", required=True, help="directory of merged pair CSVs")
    p.add_argument("--out", required=True, help="sweep CSV path")
    p.add_argument("--grid-step", type=float, default=0.01)
    p.add_argument("--abs-threshold", type=float, default=5.0, help="channel difference bound, ug/m3")

    p = sub.add_parser("flag", help="apply the dual-channel flag rule to hourly records")
    p.add_argument("--hourly", required=True)
    p.add_argument("--meta", required=True, help="enriched metadata (for operational hours)")
    p.add_argument("--out", required=True, help="flagged CSV path")
    p.add_argument("--percentile", type=float, default=0.85)
    p.add_argument("--abs-threshold", type=float, default=5.0)

    p = sub.add_parser("degrade", help="profiles, permanent-degradation verdicts, fleet series")
    p.add_argument("--flagged", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=0.4)
    p.add_argument("--min-hours", type=int, default=100)

    p = sub.add_parser("correct", help="fit a correction model on unflagged merged rows")
    p.add_argument("--merged", required=True, help="directory of merged pair CSVs")
    p.add_argument("--meta", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--model", type=int, default=2)
    p.add_argument("--percentile", type=float, default=0.85)
    p.add_argument("--abs-threshold", type=float, default=5.0)
    p.add_argument("--loso", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("trend", help="linear degradation trends, stratified and interaction fits")
    p.add_argument("--outcome", choices=["pct_flagged", "correction_error", "all"],
                   default="all", help="restrict the trend table to one outcome")
    p.add_argument("--stratify", choices=["location", "climate_zone", "all"],
                   default="all", help="restrict stratified fits to one grouping")
    p.add_argument("--flagged", help="flagged hourly CSV (for the flag-rate outcome)")
    p.add_argument("--errors", help="correction errors CSV (for error outcomes)")
    p.add_argument("--meta", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--burn-in", type=int, default=20, help="operational hours trimmed per sensor")
    p.add_argument("--hours-per-year", type=float, default=8760.0)
    p.add_argument("--weighted", action="store_true",
                   help="weight flag-rate trend fits by the measurement count at each hour")
    p.add_argument("--cluster-robust", action="store_true",
                   help="sensor-clustered standard errors for row-level error trends")

    p = sub.add_parser("gam", help="penalized-spline smooth with cluster bootstrap bands")
    p.add_argument("--outcome", required=True, choices=["pct_flagged", "correction_error"])
    p.add_argument("--flagged", help="flagged hourly CSV (pct_flagged outcome)")
    p.add_argument("--errors", help="correction errors CSV (correction_error outcome)")
    p.add_argument("--out", required=True, help="output JSON path")
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--basis-size", type=int, default=20)
    p.add_argument("--bootstrap-m", type=int, default=None, help="clusters per replicate")
    p.add_argument("--burn-in", type=int, default=20)

    p = sub.add_parser("synth", help="generate a synthetic fleet scenario")
    p.add_argument("--scenario", required=True, help="scenario JSON")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("report", help="run the full chain and emit all figure/table data")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1)

    return parser


def _expand_raw(paths) -> list[Path]:
    out: list[Path] = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            out.extend(sorted(path.glob("*.csv")))
        else:
            out.append(path)
    return out


def _resolve_csv(path_arg, conventional_name: str) -> Path:
    """Accept either a CSV file or a stage output directory holding the
    conventionally named file."""
    path = Path(path_arg)
    if path.is_dir():
        candidate = path / conventional_name
        if not candidate.exists():
            raise FileNotFoundError(candidate)
        return candidate
    return path


def _cmd_fetch(args) -> int:
    job = acquisition.FetchJob(
        source=args.source,
        ids=[i for i in args.ids.split(",") if i],
        start=ingest.parse_timestamp_utc(args.start),
        end=ingest.parse_timestamp_utc(args.end),
        page_days=args.page_days,
        rate_limit_per_min=args.rate_limit,
    )
    if args.source == "sensor_api":
        manifest = acquisition.fetch_sensor_history(
            job, os.environ.get("SENSOR_API_KEY", ""), args.out
        )
    else:
        manifest = acquisition.fetch_reference_hourly(
            job, os.environ.get("AQS_EMAIL", ""), os.environ.get("AQS_KEY", ""), args.out
        )
    print(f"fetched {len(manifest['windows'])} windows, {manifest['request_count']} requests")
    return 0


def _cmd_ingest(args) -> int:
    config = PipelineConfig(temp_unit=args.temp_unit, threads=args.threads)
    result = run_ingest(_expand_raw(args.raw), args.meta, args.zones, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ingest.write_hourly_csv(result.hourly, out_dir / "hourly.csv")
    with open(out_dir / "qc_report.json", "w", encoding="utf-8") as fh:
        json.dump(
            {"qc": result.qc_report.to_dict(), "parse": result.parse_report.to_dict()},
            fh, indent=2, sort_keys=True,
        )
    write_meta_csv(result.meta, out_dir / "sensor_meta.csv")
    print(f"retained {result.qc_report.retained} records -> {len(result.hourly)} hourly rows")
    return 0


def _cmd_collocate(args) -> int:
    hourly = ingest.read_hourly_csv(_resolve_csv(args.hourly, "hourly.csv"))
    metas = read_meta_csv(_resolve_csv(args.meta, "sensor_meta.csv"))
    config = PipelineConfig(radius_m=args.radius)
    pairs = run_collocate(hourly, metas, args.sites, args.reference, config)
    out_dir = Path(args.out)
    (out_dir / "merged").mkdir(parents=True, exist_ok=True)
    collocation.write_pair_manifest(pairs, out_dir / "pairs.csv")
    for pair in pairs:
        name = f"{pair.sensor_id}__{pair.monitor_id.replace('|', '_')}.csv"
        collocation.write_merged_csv(pair, out_dir / "merged" / name)
    print(f"matched {len(pairs)} sensor/monitor pairs")
    return 0


def _cmd_flag_sweep(args) -> int:
    pairs = read_merged_dir(args.merged)
    sweep = flagging.sweep_percentiles(
        pairs, grid=flagging.default_grid(args.grid_step), abs_threshold=args.abs_threshold
    )
    sweep.rows.to_csv(args.out, index=False)
    print(f"selected percentile {sweep.selected_x:.2f} (by correlation: {sweep.selected_x_by_r:.2f})")
    return 0


def _cmd_flag(args) -> int:
    hourly = ingest.read_hourly_csv(_resolve_csv(args.hourly, "hourly.csv"))
    metas = read_meta_csv(_resolve_csv(args.meta, "sensor_meta.csv"))
    rule = flagging.build_flag_rule(hourly, args.percentile, args.abs_threshold)
    flagged = flagging.apply_flags(hourly, rule)
    starts = {m.sensor_id: m.deploy_start for m in metas.values() if m.deploy_start}
    flagged = with_op_hours(flagged, starts)
    out = flagged.copy()
    out["hour"] = out["hour"].map(ingest.format_timestamp_utc)
    out.to_csv(args.out, index=False)
    print(f"flagged {int(flagged['flag'].sum())} of {len(flagged)} hourly records")
    return 0


def _cmd_degrade(args) -> int:
    flagged = read_flagged_csv(_resolve_csv(args.flagged, "flagged.csv"))
    metas = read_meta_csv(_resolve_csv(args.meta, "sensor_meta.csv"))
    profiles = degradation.fleet_profiles(
        flagged, threshold=args.threshold, min_hours=args.min_hours
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in profiles:
        meta = metas.get(p.sensor_id)
        rows.append(
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
    pd.DataFrame(rows).to_csv(out_dir / "degraded_sensors.csv", index=False)
    degradation.flag_rate_by_op_hour(flagged).to_csv(
        out_dir / "flag_rate_by_op_hour.csv", index=False
    )
    with open(out_dir / "condition_contrast.json", "w", encoding="utf-8") as fh:
        json.dump(degradation.condition_contrast(flagged).to_dict(), fh, indent=2, sort_keys=True)
    n_degraded = sum(r["degraded"] for r in rows)
    print(f"{n_degraded} of {len(rows)} sensors permanently degraded")
    return 0


def _cmd_correct(args) -> int:
    pairs = read_merged_dir(args.merged)
    metas = read_meta_csv(_resolve_csv(args.meta, "sensor_meta.csv"))
    frames = []
    for pair in pairs:
        sub = pair.merged.copy()
        sub.insert(0, "sensor_id", pair.sensor_id)
        frames.append(sub)
    merged = pd.concat(frames, ignore_index=True)
    rule = flagging.build_flag_rule(merged, args.percentile, args.abs_threshold)
    merged = flagging.apply_flags(merged, rule)
    starts = {m.sensor_id: m.deploy_start for m in metas.values() if m.deploy_start}
    merged = with_op_hours(merged, starts)
    unflagged = merged[merged["flag"] == 0]

    spec = correction.CorrectionModelSpec.by_id(args.model)
    fit = correction.fit_correction(unflagged, spec)
    doc = fit.to_dict()
    if args.loso and unflagged["sensor_id"].nunique() >= 2:
        doc["loso"] = correction.loso_cross_validate(unflagged, spec).to_dict()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "correction_fit.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    errors = correction.apply_correction(fit, unflagged)
    out = errors[
        ["sensor_id", "hour", "op_hour", "corrected", "pm25_ref", "error", "norm_error"]
    ].rename(columns={"pm25_ref": "ref"})
    out["hour"] = out["hour"].map(ingest.format_timestamp_utc)
    out.to_csv(out_dir / "correction_errors.csv", index=False)
    correction.error_by_op_hour(errors).to_csv(out_dir / "error_by_op_hour.csv", index=False)
    print(
        f"model {args.model}: training r={fit.training_r:.4f} rmse={fit.training_rmse:.3f} "
        f"on {fit.n_rows} rows"
    )
    return 0


def _cmd_trend(args) -> int:
    if not args.flagged and not args.errors:
        raise ValueError("provide --flagged and/or --errors")
    metas = read_meta_csv(_resolve_csv(args.meta, "sensor_meta.csv"))
    config = PipelineConfig(
        burn_in_hours=args.burn_in,
        hours_per_year=args.hours_per_year,
        weight_trends_by_n=args.weighted,
        cluster_robust=args.cluster_robust,
    )
    empty_flagged = pd.DataFrame(
        columns=["sensor_id", "hour", "op_hour", "flag", "pm25_cf1_mean"]
    )
    empty_errors = pd.DataFrame(columns=["sensor_id", "hour", "op_hour", "error", "norm_error"])
    flagged = (
        read_flagged_csv(_resolve_csv(args.flagged, "flagged.csv")) if args.flagged else empty_flagged
    )
    errors = read_errors_csv(args.errors) if args.errors else empty_errors
    flagged_trend = trim_first_hours(flagged, args.burn_in) if len(flagged) else flagged
    if len(errors) and len(flagged):
        # judge each sensor's burn-in window against its full hourly series
        errors_trend = drop_burn_in_rows(errors, flagged, args.burn_in)
    elif len(errors):
        errors_trend = trim_first_hours(errors, args.burn_in)
    else:
        errors_trend = errors
    rows, modification = _trend_tables(flagged_trend, errors_trend, metas, config)
    if args.outcome != "all":
        rows = [r for r in rows if r["outcome"] == args.outcome]
        modification = {k: v for k, v in modification.items() if k == args.outcome}
    if args.stratify != "all":
        rows = [r for r in rows if r["strata"] in (args.stratify, "all")]
        modification = {
            k: {s_: p_ for s_, p_ in v.items() if s_ == args.stratify}
            for k, v in modification.items()
        }
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(
        rows,
        columns=["outcome", "strata", "stratum", "n", "intercept", "slope_per_hour",
                 "slope_per_year", "ci_low_per_year", "ci_high_per_year", "p_value"],
    ).to_csv(out_dir / "trends.csv", index=False)
    with open(out_dir / "trend_effect_modification.json", "w", encoding="utf-8") as fh:
        json.dump(modification, fh, indent=2, sort_keys=True)
    if len(flagged) and len(errors):
        interactions = _interaction_tables(flagged, errors_trend, config)
        pd.DataFrame(
            interactions,
            columns=["outcome", "threshold", "term", "coefficient", "ci_low", "ci_high",
                     "p_value", "n"],
        ).to_csv(out_dir / "interaction_trends.csv", index=False)
    print(f"wrote {len(rows)} trend fits")
    return 0


def _cmd_gam(args) -> int:
    if args.outcome == "pct_flagged":
        if not args.flagged:
            raise ValueError("--outcome pct_flagged needs --flagged")
        flagged = trim_first_hours(read_flagged_csv(args.flagged), args.burn_in)
        series = degradation.flag_rate_by_op_hour(flagged)
        domain = (float(series["op_hour"].min()), float(series["op_hour"].max()))
        fit = trend.fit_pspline_gam(
            series["op_hour"], series["pct_flagged"], basis_size=args.basis_size, domain=domain
        )

        def replicate(sample, rng):
            rep = degradation.flag_rate_by_op_hour(sample)
            return trend.fit_pspline_gam(
                rep["op_hour"], rep["pct_flagged"], basis_size=args.basis_size, domain=domain
            ).curve

        fit.bands = trend.cluster_bootstrap_bands(
            flagged, replicate, replicates=args.replicates, m=args.bootstrap_m, seed=args.seed
        )
    else:
        if not args.errors:
            raise ValueError("--outcome correction_error needs --errors")
        errors = trim_first_hours(read_errors_csv(args.errors), args.burn_in)
        err = errors[errors["error"].notna()]
        domain = (float(err["op_hour"].min()), float(err["op_hour"].max()))
        fit = trend.fit_pspline_gam(
            err["op_hour"], err["error"], basis_size=args.basis_size, domain=domain
        )

        def replicate(sample, rng):
            sub = sample[sample["error"].notna()]
            return trend.fit_pspline_gam(
                sub["op_hour"], sub["error"], basis_size=args.basis_size, domain=domain
            ).curve

        fit.bands = trend.cluster_bootstrap_bands(
            err, replicate, replicates=args.replicates, m=args.bootstrap_m, seed=args.seed
        )
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(_gam_doc(fit, args.outcome), fh, indent=2, sort_keys=True)
    print(f"gam edf={fit.edf:.2f} lambda={fit.lam:.4g} ({fit.bands.replicates_used} replicates)")
    return 0


def _cmd_synth(args) -> int:
    config = synthfleet.ScenarioConfig.from_json(args.scenario)
    labels = synthfleet.generate(config, args.out)
    print(f"generated {config.n_sensors} sensors x {config.hours} h under {args.out}")
    return 0


def _cmd_report(args) -> int:
    config = PipelineConfig.from_json(args.config)
    config.threads = args.threads
    manifest = run_report(config, args.out)
    print(f"wrote {len(manifest['artifacts'])} artifacts to {args.out}")
    return 0


_COMMANDS = {
    "fetch": _cmd_fetch,
    "ingest": _cmd_ingest,
    "collocate": _cmd_collocate,
    "flag-sweep": _cmd_flag_sweep,
    "flag": _cmd_flag,
    "degrade": _cmd_degrade,
    "correct": _cmd_correct,
    "trend": _cmd_trend,
    "gam": _cmd_gam,
    "synth": _cmd_synth,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"driftwatch: input not found: {exc}", file=sys.stderr)
        return DATA_EXIT
    except (ingest.SchemaError, acquisition.CredentialError, ValueError) as exc:
        print(f"driftwatch: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
