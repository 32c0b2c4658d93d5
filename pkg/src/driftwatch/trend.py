"""Degradation-outcome trends over operational time: simple linear fits
with classical confidence intervals, stratified fits with an
effect-modification test, interaction models against cumulative
high-concentration exposure, penalized B-spline smoothing with GCV, and
cluster bootstrap confidence bands.

The per-year slope convention is 8,760 hours per year.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy.interpolate import BSpline

from . import stats

HOURS_PER_YEAR = 8760.0
DEFAULT_BASIS_SIZE = 20
DEFAULT_SPLINE_DEGREE = 3
DEFAULT_PENALTY_ORDER = 2
DEFAULT_REPLICATES = 100
DEFAULT_CURVE_POINTS = 200

# RSS below this scale-aware floor is treated as numerically zero when
# comparing GCV scores, so that interpolating fits (e.g. exact-linear
# input) resolve to the smoothest candidate instead of FP noise.
_RSS_FLOOR_REL = 1e-10


@dataclass
class TrendFit:
    """Linear trend of a degradation outcome on operational hours."""

    outcome: str
    stratum: str
    n: int
    intercept: Optional[float]
    slope_per_hour: Optional[float]
    slope_per_year: Optional[float]
    ci_low_per_hour: Optional[float]
    ci_high_per_hour: Optional[float]
    ci_low_per_year: Optional[float]
    ci_high_per_year: Optional[float]
    p_value: Optional[float]
    hours_per_year: float = HOURS_PER_YEAR

    @property
    def is_null(self) -> bool:
        return self.slope_per_hour is None


@dataclass
class StratifiedTrends:
    fits: list[TrendFit]
    interaction_f: Optional[float]
    interaction_p: Optional[float]
    interaction_df: Optional[tuple[int, int]]


@dataclass
class InteractionFit:
    """OLS of an error outcome on hour, a cumulative exceedance count, and
    their interaction (plus intercept): exactly four coefficients."""

    outcome: str
    threshold: float
    coefficients: np.ndarray  # intercept, hour, count, hour_x_count
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    standard_errors: np.ndarray
    p_values: np.ndarray
    n: int

    TERM_NAMES = ("intercept", "hour", "count", "hour_x_count")


def _cluster_robust_slope_inference(X, y, coef, clusters):
    """CR1 sandwich standard errors with G-1 degrees of freedom: the
    classical-independence alternative when rows repeat within sensors."""
    from scipy.stats import t as t_dist

    clusters = np.asarray(clusters)
    resid = y - X @ coef
    labels = pd.unique(clusters)
    n_groups = labels.size
    n, p = X.shape
    if n_groups < 2:
        raise ValueError("cluster-robust inference needs at least 2 clusters")
    xtx_inv = np.linalg.pinv(X.T @ X)
    meat = np.zeros((p, p))
    for label in labels:
        idx = clusters == label
        score = X[idx].T @ resid[idx]
        meat += np.outer(score, score)
    correction = (n_groups / (n_groups - 1)) * ((n - 1) / (n - p))
    cov = correction * xtx_inv @ meat @ xtx_inv
    se = np.sqrt(np.diag(cov))
    df = n_groups - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stats = np.where(se > 0, coef / se, 0.0)
    p_values = np.array([2.0 * (1.0 - stats.t_distribution_cdf(abs(t), df)) for t in t_stats])
    t_crit = float(t_dist.ppf(0.975, df))
    return se, p_values, coef - t_crit * se, coef + t_crit * se


def linear_trend(
    x,
    y,
    outcome: str = "outcome",
    stratum: str = "all",
    weights=None,
    cluster=None,
    hours_per_year: float = HOURS_PER_YEAR,
) -> TrendFit:
    """OLS of an outcome on operational hours with classical 95% CI and a
    two-sided p-value for the slope. Per-year figures are the per-hour
    estimates scaled by hours_per_year. Optional weights fit by weighted
    least squares (rows scaled by sqrt(weight)). Passing per-row cluster
    labels (e.g. sensor ids) switches the slope inference to CR1
    cluster-robust sandwich errors with G-1 degrees of freedom; the point
    estimates are unchanged."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("x and y must have equal length")
    if x.size < 3:
        raise ValueError("need at least 3 observations for a trend fit")
    if np.all(x == x[0]):
        raise ValueError("operational hours are constant; trend undefined")
    X = np.column_stack([np.ones_like(x), x])
    if weights is not None:
        w = np.sqrt(np.asarray(weights, dtype=float).ravel())
        X_fit, y_fit = X * w[:, None], y * w
    else:
        X_fit, y_fit = X, y
    res = stats.ols(y_fit, X_fit, column_names=["intercept", "hour"])
    slope = float(res.coefficients[1])
    ci_low, ci_high = float(res.ci_lower[1]), float(res.ci_upper[1])
    p_value = float(res.p_values[1])
    if cluster is not None:
        _, p_values, lo, hi = _cluster_robust_slope_inference(
            X_fit, y_fit, res.coefficients, cluster
        )
        ci_low, ci_high = float(lo[1]), float(hi[1])
        p_value = float(p_values[1])
    return TrendFit(
        outcome=outcome,
        stratum=stratum,
        n=int(x.size),
        intercept=float(res.coefficients[0]),
        slope_per_hour=slope,
        slope_per_year=slope * hours_per_year,
        ci_low_per_hour=ci_low,
        ci_high_per_hour=ci_high,
        ci_low_per_year=ci_low * hours_per_year,
        ci_high_per_year=ci_high * hours_per_year,
        p_value=p_value,
        hours_per_year=hours_per_year,
    )


def _null_fit(outcome: str, stratum: str, n: int) -> TrendFit:
    return TrendFit(
        outcome=outcome, stratum=stratum, n=n,
        intercept=None, slope_per_hour=None, slope_per_year=None,
        ci_low_per_hour=None, ci_high_per_hour=None,
        ci_low_per_year=None, ci_high_per_year=None, p_value=None,
    )


def stratified_trends(
    df: pd.DataFrame,
    outcome_col: str,
    stratum_col: str,
    x_col: str = "op_hour",
    outcome: Optional[str] = None,
    weight_col: Optional[str] = None,
    cluster_col: Optional[str] = None,
) -> StratifiedTrends:
    """Independent trend per stratum, plus a pooled effect-modification
    test: a partial F-test of the stratum-by-hour interaction terms against
    the main-effects model. Strata with fewer than 3 rows (or constant
    hours) are reported as null fits and stay out of the pooled test.
    With weight_col set, fits and the pooled test run as weighted least
    squares; cluster_col switches per-stratum slope inference to
    cluster-robust errors (the pooled F-test stays classical)."""
    outcome = outcome or outcome_col
    fits: list[TrendFit] = []
    usable: list[tuple[str, pd.DataFrame]] = []
    for stratum, grp in df.groupby(stratum_col, sort=True):
        x = grp[x_col].to_numpy(dtype=float)
        y = grp[outcome_col].to_numpy(dtype=float)
        if len(grp) < 3 or np.all(x == x[0]):
            fits.append(_null_fit(outcome, str(stratum), len(grp)))
            continue
        w = grp[weight_col].to_numpy(dtype=float) if weight_col else None
        clusters = grp[cluster_col].to_numpy() if cluster_col else None
        if clusters is not None and pd.unique(clusters).size < 2:
            clusters = None
        fits.append(
            linear_trend(x, y, outcome=outcome, stratum=str(stratum), weights=w, cluster=clusters)
        )
        usable.append((str(stratum), grp))

    interaction_f = interaction_p = interaction_df = None
    if len(usable) >= 2:
        parts = [grp.assign(_stratum=st) for st, grp in usable]
        pooled = pd.concat(parts, ignore_index=True)
        x = pooled[x_col].to_numpy(dtype=float)
        y = pooled[outcome_col].to_numpy(dtype=float)
        levels = sorted({st for st, _ in usable})
        dummies = np.column_stack(
            [(pooled["_stratum"] == lv).to_numpy(dtype=float) for lv in levels[1:]]
        )
        base = np.column_stack([np.ones_like(x), x, dummies])
        full = np.column_stack([base, dummies * x[:, None]])
        if weight_col:
            sw = np.sqrt(pooled[weight_col].to_numpy(dtype=float))
            y = y * sw
            base = base * sw[:, None]
            full = full * sw[:, None]
        q = dummies.shape[1]
        try:
            res_reduced = stats.ols(y, base)
            res_full = stats.ols(y, full)
        except (stats.RankDeficientError, ValueError):
            return StratifiedTrends(fits, None, None, None)
        df2 = res_full.df_resid
        num = (res_reduced.rss - res_full.rss) / q
        den = res_full.rss / df2
        if den > 0:
            f_stat = num / den
            interaction_f = float(f_stat)
            interaction_p = 1.0 - stats.f_distribution_cdf(f_stat, q, df2)
            interaction_df = (q, df2)
    return StratifiedTrends(fits, interaction_f, interaction_p, interaction_df)


def interaction_trend(
    df: pd.DataFrame,
    outcome_col: str,
    count_col: str,
    threshold: float,
    x_col: str = "op_hour",
) -> InteractionFit:
    """Fit outcome ~ hour + count + hour:count. A degenerate count column
    (constant or identically zero) makes the design rank deficient; the
    error names the offending terms."""
    data = df[[x_col, count_col, outcome_col]].dropna()
    if len(data) < 5:
        raise ValueError("need at least 5 rows for the interaction model")
    x = data[x_col].to_numpy(dtype=float)
    c = data[count_col].to_numpy(dtype=float)
    y = data[outcome_col].to_numpy(dtype=float)
    X = np.column_stack([np.ones_like(x), x, c, x * c])
    res = stats.ols(y, X, column_names=list(InteractionFit.TERM_NAMES))
    return InteractionFit(
        outcome=outcome_col,
        threshold=float(threshold),
        coefficients=res.coefficients,
        ci_lower=res.ci_lower,
        ci_upper=res.ci_upper,
        standard_errors=res.standard_errors,
        p_values=res.p_values,
        n=res.n,
    )


# ---------------------------------------------------------------------------
# Penalized B-spline smoothing
# ---------------------------------------------------------------------------


@dataclass
class SplineBasis:
    """Cubic (by default) B-spline basis with basis_size functions on
    equally spaced knots spanning a fixed domain."""

    domain: tuple[float, float]
    basis_size: int
    degree: int
    knots: np.ndarray

    @classmethod
    def build(
        cls,
        domain: tuple[float, float],
        basis_size: int = DEFAULT_BASIS_SIZE,
        degree: int = DEFAULT_SPLINE_DEGREE,
    ) -> "SplineBasis":
        lo, hi = float(domain[0]), float(domain[1])
        if not hi > lo:
            raise ValueError("domain must have positive width")
        if basis_size <= degree + 1:
            raise ValueError(f"basis_size must exceed degree+1={degree + 1}")
        n_segments = basis_size - degree
        h = (hi - lo) / n_segments
        knots = lo + h * np.arange(-degree, n_segments + degree + 1)
        return cls(domain=(lo, hi), basis_size=basis_size, degree=degree, knots=knots)

    def design(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        lo, hi = self.domain
        if np.any(x < lo) or np.any(x > hi):
            raise ValueError("x outside basis domain")
        return BSpline.design_matrix(x, self.knots, self.degree).toarray()


def difference_penalty(basis_size: int, order: int = DEFAULT_PENALTY_ORDER) -> np.ndarray:
    """Penalty matrix D'D for order-th differences of the coefficients.
    Its null space for order 2 holds linear functions, so heavy smoothing
    shrinks the fit toward a straight line."""
    D = np.diff(np.eye(basis_size), n=order, axis=0)
    return D.T @ D


def default_lambda_grid(n_points: int = 50) -> np.ndarray:
    return np.logspace(-6, 6, n_points)


def penalized_coefficients(B: np.ndarray, penalty: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    return np.linalg.solve(B.T @ B + lam * penalty, B.T @ y)


def effective_df(B: np.ndarray, penalty: np.ndarray, lam: float) -> float:
    """Trace of the smoother (hat) matrix at lam."""
    BtB = B.T @ B
    return float(np.trace(np.linalg.solve(BtB + lam * penalty, BtB)))


def hat_leverages(B: np.ndarray, penalty: np.ndarray, lam: float) -> np.ndarray:
    """Diagonal of the hat matrix: leverage of each observation. Summing
    these reproduces effective_df (the invariant is tested both ways)."""
    M = B.T @ B + lam * penalty
    return np.einsum("ij,ij->i", B, np.linalg.solve(M, B.T).T)


@dataclass
class GcvSelection:
    lam: float
    edf: float
    gcv: float
    table: pd.DataFrame  # columns: lam, gcv, edf (NaN rows were excluded)


def gcv_select(B: np.ndarray, penalty: np.ndarray, y: np.ndarray, lambdas=None) -> GcvSelection:
    """Select the smoothing parameter minimizing generalized
    cross-validation, GCV(lam) = n * RSS / (n - tr(H))^2, over a log-spaced
    grid. Grid points where tr(H) >= n (or the solve fails) are excluded.

    Fits whose RSS is numerically zero (below a scale-aware floor) are
    treated as exact ties and resolve to the largest lambda, i.e. the
    smoothest interpolant; general ties resolve the same way.
    """
    if lambdas is None:
        lambdas = default_lambda_grid()
    lambdas = np.asarray(sorted(lambdas), dtype=float)
    if lambdas.size < 2 or np.any(lambdas <= 0):
        raise ValueError("lambda grid must be positive with at least 2 points")
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    BtB = B.T @ B
    Bty = B.T @ y
    scale_y = max(1.0, float(np.sqrt(np.mean(y**2))))
    rss_floor = n * (_RSS_FLOOR_REL * scale_y) ** 2

    records = []
    for lam in lambdas:
        M = BtB + lam * penalty
        try:
            coef = np.linalg.solve(M, Bty)
            tr = float(np.trace(np.linalg.solve(M, BtB)))
        except np.linalg.LinAlgError:
            records.append((lam, np.nan, np.nan))
            continue
        if tr >= n:
            records.append((lam, np.nan, np.nan))
            continue
        rss = float(np.sum((y - B @ coef) ** 2))
        if rss < rss_floor:
            rss = 0.0
        gcv = n * rss / (n - tr) ** 2
        records.append((lam, gcv, tr))
    table = pd.DataFrame(records, columns=["lam", "gcv", "edf"])
    valid = table["gcv"].notna()
    if not valid.any():
        raise ValueError("no lambda on the grid yielded a well-posed fit")
    best = table.loc[valid, "gcv"].min()
    pick = table[valid & (table["gcv"] == best)].iloc[-1]
    return GcvSelection(lam=float(pick["lam"]), edf=float(pick["edf"]), gcv=float(pick["gcv"]), table=table)


@dataclass
class BootstrapBands:
    grid: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    median: np.ndarray
    replicates_used: int
    replicates_dropped: int
    high_drop_warning: bool


@dataclass
class GamFit:
    """Penalized-spline smooth of an outcome over operational hours."""

    basis: SplineBasis
    penalty_order: int
    lam: float
    edf: float
    gcv: float
    coefficients: np.ndarray
    grid: np.ndarray
    curve: np.ndarray
    n: int
    gcv_table: Optional[pd.DataFrame] = field(repr=False, default=None)
    bands: Optional[BootstrapBands] = None

    def predict(self, x) -> np.ndarray:
        return self.basis.design(x) @ self.coefficients


def fit_pspline_gam(
    x,
    y,
    basis_size: int = DEFAULT_BASIS_SIZE,
    degree: int = DEFAULT_SPLINE_DEGREE,
    penalty_order: int = DEFAULT_PENALTY_ORDER,
    lambdas=None,
    domain: Optional[tuple[float, float]] = None,
    curve_points: int = DEFAULT_CURVE_POINTS,
) -> GamFit:
    """Penalized least-squares B-spline fit with the smoothing parameter
    chosen by GCV. The basis uses basis_size cubic B-splines on equally
    spaced knots over the data range (or an explicit domain, which lets
    bootstrap replicates share one basis). The fitted curve is evaluated
    on a uniform grid of curve_points."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("x and y must have equal length")
    if x.size <= basis_size:
        raise ValueError(
            f"need more observations ({x.size}) than basis functions "
            f"({basis_size}); reduce basis_size"
        )
    if domain is None:
        domain = (float(x.min()), float(x.max()))
    if not domain[1] > domain[0]:
        raise ValueError("x range is degenerate")
    basis = SplineBasis.build(domain, basis_size=basis_size, degree=degree)
    B = basis.design(x)
    penalty = difference_penalty(basis_size, penalty_order)
    selection = gcv_select(B, penalty, y, lambdas)
    coef = penalized_coefficients(B, penalty, y, selection.lam)
    grid = np.linspace(domain[0], domain[1], curve_points)
    curve = basis.design(grid) @ coef
    return GamFit(
        basis=basis,
        penalty_order=penalty_order,
        lam=selection.lam,
        edf=selection.edf,
        gcv=selection.gcv,
        coefficients=coef,
        grid=grid,
        curve=curve,
        n=int(x.size),
        gcv_table=selection.table,
    )


def cluster_bootstrap_bands(
    data: pd.DataFrame,
    fit_fn: Callable[[pd.DataFrame, np.random.Generator], np.ndarray],
    replicates: int = DEFAULT_REPLICATES,
    m: Optional[int] = None,
    seed: Optional[int] = None,
    cluster_col: str = "sensor_id",
) -> BootstrapBands:
    """Pointwise 95% bands by resampling whole sensors (clusters).

    Each replicate draws m clusters with replacement (m defaults to the
    number of clusters), concatenates their rows with multiplicity, and
    calls fit_fn(sample, rng) to re-run the analysis segment and return the
    curve evaluated on a shared grid. Replicates where fit_fn raises or
    returns non-finite values are dropped and counted; more than 20%
    dropped sets a warning flag. Per-replicate RNG streams derive from the
    master seed, so results are reproducible for a given (seed, data).
    """
    clusters = np.asarray(sorted(pd.unique(data[cluster_col])))
    if clusters.size < 2:
        raise ValueError("cluster bootstrap needs at least 2 clusters")
    if m is None:
        m = clusters.size
    if m < 1:
        raise ValueError("m must be >= 1")
    groups = {c: grp for c, grp in data.groupby(cluster_col, sort=True)}
    streams = np.random.SeedSequence(seed).spawn(replicates)

    curves = []
    dropped = 0
    grid = None
    for stream in streams:
        rng = np.random.Generator(np.random.PCG64(stream))
        chosen = clusters[rng.integers(0, clusters.size, size=m)]
        sample = pd.concat([groups[c] for c in chosen], ignore_index=True)
        try:
            curve = np.asarray(fit_fn(sample, rng), dtype=float)
        except Exception:
            dropped += 1
            continue
        if grid is None:
            grid = np.arange(curve.size)
        if curve.size != grid.size or not np.all(np.isfinite(curve)):
            dropped += 1
            continue
        curves.append(curve)
    if not curves:
        raise ValueError("every bootstrap replicate failed")
    stack = np.vstack(curves)
    lower, median, upper = np.percentile(stack, [2.5, 50.0, 97.5], axis=0)
    drop_fraction = dropped / replicates
    if drop_fraction > 0.2:
        warnings.warn(
            f"{dropped}/{replicates} bootstrap replicates dropped", RuntimeWarning
        )
    return BootstrapBands(
        grid=grid,
        lower=lower,
        upper=upper,
        median=median,
        replicates_used=len(curves),
        replicates_dropped=dropped,
        high_drop_warning=drop_fraction > 0.2,
    )
