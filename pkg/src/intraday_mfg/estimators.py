"""Price statistics: forecast volatility, kernel volatility and price-forecast correlation.

All estimators work on plain arrays with time on the last axis, so they apply
equally to simulated equilibria and to external series read with
:func:`read_series`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DomainError
from .grid import TimeGrid
from .scenarios import read_columns, write_columns

__all__ = [
    "IncrementSeries",
    "forecast_volatility",
    "standard_volatility",
    "compare_forecast_estimators",
    "epanechnikov",
    "kernel_volatility",
    "average_volatility",
    "CorrelationPath",
    "increment_correlation",
    "price_forecast_correlation",
    "read_series",
    "write_volatility",
    "DEFAULT_BANDWIDTH",
]

DEFAULT_BANDWIDTH = 0.08  # hours


@dataclass(frozen=True)
class IncrementSeries:
    """Increments ``Y_i = X_{t_i} - X_{t_{i-1}}`` observed every ``dt`` hours."""

    dt: float
    values: np.ndarray

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise DomainError("increments must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise DomainError("increments must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_path(cls, path, dt: float) -> "IncrementSeries":
        return cls(dt, np.diff(np.asarray(path, dtype=float)))

    @property
    def n(self) -> int:
        return self.values.size


def _need_two(series: IncrementSeries):
    if series.n < 2:
        raise DomainError("at least two increments are needed")


def forecast_volatility(series: IncrementSeries) -> float:
    """``sqrt(dt) / (n' - 1) * sum Y_i^2``, the forecast-volatility formula taken literally.

    The expression is not dimensionally a volatility; use
    :func:`standard_volatility` for calibration.
    """
    _need_two(series)
    return float(np.sqrt(series.dt) / (series.n - 1) * np.sum(series.values**2))


def standard_volatility(series: IncrementSeries) -> float:
    """Realised volatility per square-root hour, ``sqrt(sum Y_i^2 / ((n' - 1) dt))``."""
    _need_two(series)
    return float(np.sqrt(np.sum(series.values**2) / ((series.n - 1) * series.dt)))


def compare_forecast_estimators(sigma: float, dt: float, n_increments: int, n_runs: int, seed: int = 0) -> dict:
    """Monte Carlo distribution of both forecast-volatility estimators on an ABM."""
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((n_runs, n_increments)) * sigma * np.sqrt(dt)
    printed = np.array([forecast_volatility(IncrementSeries(dt, y)) for y in Y])
    standard = np.array([standard_volatility(IncrementSeries(dt, y)) for y in Y])
    return {
        "sigma": sigma,
        "printed_mean": float(printed.mean()),
        "printed_std": float(printed.std(ddof=1)),
        "printed_expected": float(np.sqrt(dt) * n_increments / (n_increments - 1) * sigma**2 * dt),
        "standard_mean": float(standard.mean()),
        "standard_std": float(standard.std(ddof=1)),
    }


def epanechnikov(x):
    """``K(x) = 3/4 (1 - x^2)`` on ``[-1, 1]``, zero outside."""
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) <= 1.0, 0.75 * (1.0 - x**2), 0.0)


def _times(grid_or_times) -> np.ndarray:
    if isinstance(grid_or_times, TimeGrid):
        return grid_or_times.times
    t = np.asarray(grid_or_times, dtype=float)
    if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
        raise DomainError("observation times must be strictly increasing")
    return t


def kernel_volatility(price, grid, h: float = DEFAULT_BANDWIDTH, at=None) -> np.ndarray:
    """Instantaneous volatility ``sigma_hat_t`` of each price path.

    ``sigma_hat_t^2 = sum_i K_h(t_{i-1} - t) dP_i^2 / sum_i K_h(t_{i-1} - t) (t_i - t_{i-1})``
    with the Epanechnikov kernel; windows are one-sided near the ends.  Times
    whose window holds no increment are NaN.  ``at`` defaults to the
    observation times.
    """
    if not h > 0:
        raise DomainError("bandwidth must be positive")
    t = _times(grid)
    P = np.asarray(price, dtype=float)
    if P.shape[-1] != t.size:
        raise DomainError("price path and times differ in length")
    at = t if at is None else np.atleast_1d(np.asarray(at, dtype=float))
    K = epanechnikov((t[None, :-1] - at[:, None]) / h) / h  # (m, n)
    num = (np.diff(P, axis=-1) ** 2) @ K.T
    den = K @ np.diff(t)
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return np.sqrt(var)


def average_volatility(sigma_hat, axis: int = 0, how: str = "rms") -> np.ndarray:
    """Ensemble average of volatility paths.

    ``how="rms"`` averages the variance estimates (unbiased for a Gaussian
    increment) and takes the root; ``how="mean"`` averages ``sigma_hat``.
    """
    s = np.asarray(sigma_hat, dtype=float)
    if how == "rms":
        return np.sqrt(np.mean(s**2, axis=axis))
    if how == "mean":
        return np.mean(s, axis=axis)
    raise DomainError(f"unknown average {how!r}")


@dataclass(frozen=True)
class CorrelationPath:
    """Cross-scenario correlation at each window start with a Fisher-z interval."""

    t: np.ndarray
    rho: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n: int

    def to_csv(self, target=None) -> str:
        return write_columns(["t", "rho", "ci_lo", "ci_hi"], [self.t, self.rho, self.ci_lo, self.ci_hi], target)


def increment_correlation(dY, dP, t=None, level: float = 0.95) -> CorrelationPath:
    """Sample correlation over scenarios (axis 0) of two increment families ``(n_sim, m)``."""
    dY = np.asarray(dY, dtype=float)
    dP = np.asarray(dP, dtype=float)
    if dY.shape != dP.shape or dY.ndim != 2:
        raise DomainError("increments must be (n_sim, windows) arrays of equal shape")
    n = dY.shape[0]
    if n < 2:
        raise DomainError("correlation needs n_sim >= 2")
    y = dY - dY.mean(axis=0)
    p = dP - dP.mean(axis=0)
    syy = (y * y).sum(axis=0)
    spp = (p * p).sum(axis=0)
    ok = (syy > 0) & (spp > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(ok, (y * p).sum(axis=0) / np.sqrt(np.where(ok, syy * spp, 1.0)), np.nan)
    rho = np.clip(rho, -1.0, 1.0)
    zq = stats.norm.ppf(0.5 + level / 2)
    if n > 3:
        with np.errstate(divide="ignore"):
            z = np.arctanh(rho)
        half = zq / np.sqrt(n - 3)
        lo, hi = np.tanh(z - half), np.tanh(z + half)
    else:
        lo = hi = np.full_like(rho, np.nan)
    t = np.arange(rho.size, dtype=float) if t is None else np.asarray(t, dtype=float)
    return CorrelationPath(t, rho, lo, hi, n)


def price_forecast_correlation(price, forecast, grid, window: float = 0.25) -> CorrelationPath:
    """Correlation of price and forecast increments over consecutive windows.

    ``price`` and ``forecast`` are ``(n_sim, n + 1)`` ensembles on ``grid``;
    pass ``X0`` for the major forecast or ``X0 + Xbar`` for the total one.
    """
    t = _times(grid)
    dt = t[1] - t[0]
    step = int(round(window / dt))
    if step < 1 or not np.isclose(step * dt, window):
        raise DomainError("window must be a positive multiple of the grid step")
    idx = np.arange(0, t.size, step)
    P = np.asarray(price, dtype=float)[:, idx]
    Y = np.asarray(forecast, dtype=float)[:, idx]
    return increment_correlation(np.diff(Y, axis=-1), np.diff(P, axis=-1), t[idx[:-1]])


def read_series(source):
    """Read an external ``t,value`` CSV; returns ``(t, value)``."""
    try:
        header, data = read_columns(source)
    except (ValueError, IndexError) as exc:
        raise DomainError(f"malformed series: {exc}") from None
    if header[:2] != ["t", "value"]:
        raise DomainError("expected columns t,value")
    return data[:, 0], data[:, 1]


def write_volatility(t, sigma_hat, target=None) -> str:
    return write_columns(["t", "sigma_hat"], [t, sigma_hat], target)
