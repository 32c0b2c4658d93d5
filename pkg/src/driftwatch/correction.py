"""Reference-based correction of combined-channel PM2.5: an OLS model
family over PM, RH, T and their interactions, leave-one-sensor-out
validation, and per-row correction errors.

RH enters linear terms in percent (0-100). The hygroscopic-growth style
term rh^2/(1-rh) uses RH as a fraction in [0, 1), since it diverges at
saturation; rows at exactly 100% RH are dropped from such designs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd

from . import stats


def _growth(rh_pct: np.ndarray) -> np.ndarray:
    frac = rh_pct / 100.0
    return frac**2 / (1.0 - frac)


# Term name -> evaluator over (pm, rh_pct, temp_c).
_TERMS: dict[str, Callable] = {
    "pm": lambda pm, rh, t: pm,
    "rh": lambda pm, rh, t: rh,
    "temp": lambda pm, rh, t: t,
    "rh_temp": lambda pm, rh, t: rh * t,
    "pm_rh": lambda pm, rh, t: pm * rh,
    "pm_temp": lambda pm, rh, t: pm * t,
    "rh_growth": lambda pm, rh, t: _growth(rh),
    "pm_rh_growth": lambda pm, rh, t: pm * _growth(rh),
    "pm_rh_temp": lambda pm, rh, t: pm * rh * t,
}

_MODEL_TERMS: dict[int, tuple[str, ...]] = {
    1: ("pm",),
    2: ("pm", "rh"),
    3: ("pm", "temp"),
    4: ("pm", "rh", "temp", "rh_temp"),
    5: ("pm", "rh", "pm_rh"),
    6: ("pm", "temp", "pm_temp"),
    7: ("pm", "rh_growth", "pm_rh_growth"),
    8: ("pm", "rh", "temp", "pm_rh", "pm_temp", "rh_temp", "pm_rh_temp"),
}


@dataclass(frozen=True)
class CorrectionModelSpec:
    """One member of the correction model family. The intercept is always
    included and is not listed among the terms."""

    model_id: int
    terms: tuple[str, ...]

    @classmethod
    def by_id(cls, model_id: int) -> "CorrectionModelSpec":
        if model_id not in _MODEL_TERMS:
            raise ValueError(
                f"unknown correction model {model_id}; available: {sorted(_MODEL_TERMS)}"
            )
        return cls(model_id=model_id, terms=_MODEL_TERMS[model_id])

    @property
    def n_coefficients(self) -> int:
        return len(self.terms) + 1


@dataclass
class DesignMatrix:
    y: np.ndarray
    X: np.ndarray
    columns: list[str]  # "intercept" followed by the term names
    kept: np.ndarray  # boolean mask into the source rows
    n_dropped: int


@dataclass
class FittedCorrection:
    """Fitted correction coefficients plus training diagnostics."""

    spec: CorrectionModelSpec
    coefficients: np.ndarray  # intercept first, then spec.terms order
    standard_errors: Optional[np.ndarray]
    training_r: Optional[float]
    training_rmse: Optional[float]
    n_rows: int = 0
    ols: Optional[stats.OlsResult] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "model_id": self.spec.model_id,
            "terms": ["intercept", *self.spec.terms],
            "coefficients": [float(c) for c in self.coefficients],
            "standard_errors": (
                None
                if self.standard_errors is None
                else [float(s) for s in self.standard_errors]
            ),
            "training_r": self.training_r,
            "training_rmse": self.training_rmse,
            "n_rows": self.n_rows,
        }


# The built-in RH correction shipped as a reproducible default
# (combined-channel PM with a linear RH adjustment).
DEFAULT_RH_CORRECTION = FittedCorrection(
    spec=CorrectionModelSpec.by_id(2),
    coefficients=np.array([5.92, 0.57, -0.091]),
    standard_errors=None,
    training_r=None,
    training_rmse=None,
)


def build_design(rows: pd.DataFrame, spec: CorrectionModelSpec) -> DesignMatrix:
    """Assemble the response (reference PM2.5) and design matrix for a
    model. Columns are the intercept followed by the terms in declared
    order. Rows where a term is undefined (RH at exactly 100% for the
    growth term) are dropped and counted."""
    pm = rows["pm25_cf1_mean"].to_numpy(dtype=float)
    rh = rows["rh_mean"].to_numpy(dtype=float)
    temp = rows["temp_mean"].to_numpy(dtype=float)
    kept = np.ones(len(rows), dtype=bool)
    if any(t in ("rh_growth", "pm_rh_growth") for t in spec.terms):
        kept &= rh != 100.0
    y = rows["pm25_ref"].to_numpy(dtype=float)[kept] if "pm25_ref" in rows else np.array([])
    cols = [np.ones(int(kept.sum()))]
    for term in spec.terms:
        cols.append(_TERMS[term](pm[kept], rh[kept], temp[kept]))
    X = np.column_stack(cols)
    return DesignMatrix(
        y=y,
        X=X,
        columns=["intercept", *spec.terms],
        kept=kept,
        n_dropped=int(len(rows) - kept.sum()),
    )


def fit_correction(rows: pd.DataFrame, spec: CorrectionModelSpec) -> FittedCorrection:
    """OLS fit of the reference concentration on the model terms. Expects
    unflagged merged rows (flag removal happens upstream). Training metrics
    compare the corrected values with the reference."""
    design = build_design(rows, spec)
    if design.X.shape[0] <= spec.n_coefficients:
        raise ValueError(
            f"need more than {spec.n_coefficients} rows to fit model "
            f"{spec.model_id}, got {design.X.shape[0]}"
        )
    result = stats.ols(design.y, design.X, column_names=design.columns)
    corrected = design.X @ result.coefficients
    metrics_r = stats.pearson_r(corrected, design.y)
    rmse = float(np.sqrt(np.mean((corrected - design.y) ** 2)))
    return FittedCorrection(
        spec=spec,
        coefficients=result.coefficients,
        standard_errors=result.standard_errors,
        training_r=metrics_r,
        training_rmse=rmse,
        n_rows=int(design.X.shape[0]),
        ols=result,
    )


def predict(fit: FittedCorrection, rows: pd.DataFrame) -> np.ndarray:
    """Corrected concentrations for rows carrying the model's predictors.
    Rows dropped from the design evaluate to NaN."""
    design = build_design(rows, fit.spec)
    out = np.full(len(rows), np.nan)
    out[design.kept] = design.X @ fit.coefficients
    return out


def apply_correction(fit: FittedCorrection, rows: pd.DataFrame) -> pd.DataFrame:
    """Return a copy of rows with corrected values, the correction error
    (corrected minus reference) and the normalized error (error divided by
    the mean of corrected and reference; NaN where that mean is zero)."""
    out = rows.copy()
    corrected = predict(fit, rows)
    ref = rows["pm25_ref"].to_numpy(dtype=float)
    error = corrected - ref
    denom = (corrected + ref) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        norm_error = np.where(denom != 0, error / denom, np.nan)
    out["corrected"] = corrected
    out["error"] = error
    out["norm_error"] = norm_error
    return out


@dataclass
class LosoResult:
    """Leave-one-sensor-out validation: held-out predictions per sensor,
    pooled agreement, and per-sensor metrics."""

    pooled_r: Optional[float]
    pooled_rmse: Optional[float]
    per_sensor: dict[str, dict]
    predictions: pd.DataFrame
    n_fits: int
    skipped: list[str]

    def to_dict(self) -> dict:
        return {
            "pooled_r": self.pooled_r,
            "pooled_rmse": self.pooled_rmse,
            "per_sensor": self.per_sensor,
            "n_fits": self.n_fits,
            "skipped": self.skipped,
        }


def loso_cross_validate(rows: pd.DataFrame, spec: CorrectionModelSpec) -> LosoResult:
    """For each sensor, fit on every other sensor's rows and predict the
    held-out sensor. Exactly one fit is performed per sensor. Folds whose
    training design is rank deficient (or too small) are skipped and
    reported."""
    sensors = sorted(pd.unique(rows["sensor_id"]))
    if len(sensors) < 2:
        raise ValueError("leave-one-sensor-out validation needs at least 2 sensors")
    held_frames = []
    per_sensor: dict[str, dict] = {}
    skipped: list[str] = []
    n_fits = 0
    for sensor in sensors:
        train = rows[rows["sensor_id"] != sensor]
        test = rows[rows["sensor_id"] == sensor]
        try:
            fit = fit_correction(train, spec)
            n_fits += 1
        except (stats.RankDeficientError, ValueError):
            skipped.append(sensor)
            continue
        pred = predict(fit, test)
        frame = pd.DataFrame(
            {
                "sensor_id": sensor,
                "hour": test["hour"].to_numpy(),
                "corrected": pred,
                "pm25_ref": test["pm25_ref"].to_numpy(),
            }
        )
        held_frames.append(frame)
        ok = np.isfinite(pred)
        if ok.sum() >= 2:
            ref = test["pm25_ref"].to_numpy(dtype=float)[ok]
            rmse = float(np.sqrt(np.mean((pred[ok] - ref) ** 2)))
            try:
                r = stats.pearson_r(pred[ok], ref)
            except stats.DegenerateInputError:
                r = None
            per_sensor[sensor] = {"r": r, "rmse": rmse, "n": int(ok.sum())}

    predictions = (
        pd.concat(held_frames, ignore_index=True)
        if held_frames
        else pd.DataFrame(columns=["sensor_id", "hour", "corrected", "pm25_ref"])
    )
    pooled_r = pooled_rmse = None
    ok = predictions["corrected"].notna() if len(predictions) else pd.Series(dtype=bool)
    if len(predictions) and ok.sum() >= 2:
        pred = predictions.loc[ok, "corrected"].to_numpy(dtype=float)
        ref = predictions.loc[ok, "pm25_ref"].to_numpy(dtype=float)
        pooled_rmse = float(np.sqrt(np.mean((pred - ref) ** 2)))
        try:
            pooled_r = stats.pearson_r(pred, ref)
        except stats.DegenerateInputError:
            pooled_r = None
    return LosoResult(
        pooled_r=pooled_r,
        pooled_rmse=pooled_rmse,
        per_sensor=per_sensor,
        predictions=predictions,
        n_fits=n_fits,
        skipped=skipped,
    )


def error_by_op_hour(errors: pd.DataFrame) -> pd.DataFrame:
    """Mean correction error across sensors at each operational hour, with
    the contributing measurement count."""
    valid = errors[errors["error"].notna()]
    grouped = valid.groupby("op_hour", sort=True)["error"].agg(["mean", "count"])
    return pd.DataFrame(
        {
            "op_hour": grouped.index.to_numpy(),
            "mean_error": grouped["mean"].to_numpy(),
            "n": grouped["count"].to_numpy(),
        }
    )
