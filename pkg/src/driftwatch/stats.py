"""Shared statistical primitives: OLS with classical inference, Pearson
correlation, Welch's t-test, linear-interpolation quantiles, and the
t/F distribution CDFs they rely on.

Everything here is deterministic and operates on plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc
from scipy.stats import t as _t_dist


class RankDeficientError(ValueError):
    """Raised when a design matrix does not have full column rank."""


class DegenerateInputError(ValueError):
    """Raised when an input has no variance where variance is required."""


@dataclass(frozen=True)
class OlsResult:
    """Ordinary least squares fit with classical (t-based) inference."""

    coefficients: np.ndarray
    standard_errors: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    rss: float
    r_squared: float
    n: int
    rank: int
    df_resid: int
    sigma2: float
    cov: np.ndarray = field(repr=False)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coefficients


def ols(y, X, column_names=None) -> OlsResult:
    """Least squares of y on the columns of X via SVD, with classical SEs,
    t statistics, two-sided p-values and 95% confidence intervals.

    X must include its own intercept column if one is wanted. R-squared is
    computed against the centered total sum of squares, which is the usual
    convention for models that contain an intercept.

    Raises RankDeficientError when rank(X) < X.shape[1]; the message names
    the column combinations spanning the null space.
    """
    y = np.asarray(y, dtype=float).ravel()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, p = X.shape
    if y.shape[0] != n:
        raise ValueError(f"length mismatch: y has {y.shape[0]} rows, X has {n}")

    u, s, vt = np.linalg.svd(X, full_matrices=False)
    tol = s[0] * max(n, p) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    if rank < p:
        names = column_names or [f"x{j}" for j in range(p)]
        null_desc = []
        for row in vt[rank:]:
            terms = [f"{row[j]:+.3g}*{names[j]}" for j in range(p) if abs(row[j]) > 1e-8]
            null_desc.append(" ".join(terms))
        raise RankDeficientError(
            f"design matrix rank {rank} < {p} columns; "
            f"null space: {'; '.join(null_desc)}"
        )
    if n <= p:
        raise ValueError(f"need n > number of columns for inference (n={n}, p={p})")

    coef = vt.T @ ((u.T @ y) / s)
    resid = y - X @ coef
    rss = float(resid @ resid)
    df_resid = n - p
    sigma2 = rss / df_resid
    # (X'X)^-1 = V diag(1/s^2) V'
    xtx_inv = (vt.T / s**2) @ vt
    cov = sigma2 * xtx_inv
    se = np.sqrt(np.diag(cov))

    with np.errstate(divide="ignore", invalid="ignore"):
        t_stats = np.where(se > 0, coef / se, 0.0)
    p_values = np.array([2.0 * (1.0 - t_distribution_cdf(abs(t), df_resid)) for t in t_stats])
    t_crit = float(_t_dist.ppf(0.975, df_resid))
    ci_lower = coef - t_crit * se
    ci_upper = coef + t_crit * se

    tss = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - rss / tss if tss > 0 else (1.0 if rss == 0 else 0.0)

    return OlsResult(
        coefficients=coef,
        standard_errors=se,
        t_stats=t_stats,
        p_values=p_values,
        ci_lower=ci_lower,
        ci_upper=ci_upper,
        rss=rss,
        r_squared=r_squared,
        n=n,
        rank=rank,
        df_resid=df_resid,
        sigma2=sigma2,
        cov=cov,
    )


def pearson_r(x, y) -> float:
    """Sample Pearson correlation. Requires n >= 2 and nonzero variance
    in both inputs (DegenerateInputError otherwise)."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("x and y must have equal length")
    if x.size < 2:
        raise ValueError("need at least 2 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("correlation undefined: zero variance input")
    return float((dx @ dy) / np.sqrt(sxx * syy))


def welch_t(x, y) -> tuple[float, float, float]:
    """Welch's unequal-variance two-sample t-test.

    Returns (t, df, p) with Welch-Satterthwaite degrees of freedom and a
    two-sided p-value from the exact t CDF. When both samples have zero
    variance and equal means the test is vacuous: returns (0, nx+ny-2, 1).
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    nx, ny = x.size, y.size
    if nx < 2 or ny < 2:
        raise ValueError("each sample needs at least 2 observations")
    vx = float(np.var(x, ddof=1))
    vy = float(np.var(y, ddof=1))
    diff = float(x.mean() - y.mean())
    se2 = vx / nx + vy / ny
    if se2 == 0.0:
        if diff == 0.0:
            return 0.0, float(nx + ny - 2), 1.0
        return float(np.sign(diff)) * np.inf, float(nx + ny - 2), 0.0
    t_stat = diff / np.sqrt(se2)
    df = se2**2 / ((vx / nx) ** 2 / (nx - 1) + (vy / ny) ** 2 / (ny - 1))
    p = 2.0 * (1.0 - t_distribution_cdf(abs(t_stat), df))
    return float(t_stat), float(df), float(p)


def quantile(values, q) -> float:
    """Empirical quantile with linear interpolation between order statistics
    (the common default definition; q=0 gives the minimum, q=1 the maximum)."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("quantile of empty input")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    h = (v.size - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))


def t_distribution_cdf(t, df) -> float:
    """Student-t CDF via the regularized incomplete beta function."""
    if df <= 0:
        raise ValueError(f"df must be positive, got {df}")
    t = float(t)
    if np.isinf(t):
        return 1.0 if t > 0 else 0.0
    x = df / (df + t * t)
    tail = 0.5 * float(betainc(df / 2.0, 0.5, x))
    return 1.0 - tail if t >= 0 else tail


def f_distribution_cdf(f, df1, df2) -> float:
    """F distribution CDF via the regularized incomplete beta function."""
    if df1 <= 0 or df2 <= 0:
        raise ValueError("degrees of freedom must be positive")
    f = float(f)
    if f <= 0:
        return 0.0
    x = df1 * f / (df1 * f + df2)
    return float(betainc(df1 / 2.0, df2 / 2.0, x))
