import io

import numpy as np
import pytest

from intraday_mfg.errors import DomainError
from intraday_mfg.estimators import (
    IncrementSeries,
    average_volatility,
    compare_forecast_estimators,
    epanechnikov,
    forecast_volatility,
    increment_correlation,
    kernel_volatility,
    price_forecast_correlation,
    read_series,
    standard_volatility,
    write_volatility,
)
from intraday_mfg.grid import TimeGrid


# forecast volatility ---------------------------------------------------------

def test_forecast_volatility_zero_increments():
    assert forecast_volatility(IncrementSeries(0.25, np.zeros(10))) == 0.0


def test_forecast_volatility_direct_substitution():
    assert forecast_volatility(IncrementSeries(1.0, [1.0, 1.0])) == pytest.approx(2.0)


def test_forecast_volatility_needs_two_increments():
    with pytest.raises(DomainError):
        forecast_volatility(IncrementSeries(1.0, [1.0]))
    with pytest.raises(DomainError):
        standard_volatility(IncrementSeries(1.0, [1.0]))


@pytest.mark.parametrize("dt, values", [(0.0, [1, 2]), (-1.0, [1, 2]), (1.0, [1, np.nan]), (1.0, [[1, 2]])])
def test_increment_series_validation(dt, values):
    with pytest.raises(DomainError):
        IncrementSeries(dt, values)


def test_from_path_differences():
    s = IncrementSeries.from_path([1.0, 3.0, 2.0], 0.5)
    np.testing.assert_array_equal(s.values, [2.0, -1.0])


def test_printed_and_standard_estimators_disagree_on_abm():
    # sigma = 73, quarter-hour steps, 87 increments: the standard estimator is
    # calibrated, the printed one estimates sqrt(dt) * n'/(n'-1) * sigma^2 dt.
    r = compare_forecast_estimators(73.0, 0.25, 87, 10_000, seed=3)
    assert r["standard_mean"] == pytest.approx(73.0, rel=0.01)
    se = r["printed_std"] / np.sqrt(10_000)
    assert abs(r["printed_mean"] - r["printed_expected"]) < 4 * se
    assert r["printed_mean"] / 73.0 > 5


# kernel volatility -----------------------------------------------------------

def test_epanechnikov_values():
    assert epanechnikov(0.0) == 0.75
    np.testing.assert_array_equal(epanechnikov([-1.5, -1.0, 1.0, 2.0]), 0.0)
    assert epanechnikov(0.5) == pytest.approx(0.5625)


def test_kernel_volatility_constant_path_is_zero():
    g = TimeGrid(24, 96)
    s = kernel_volatility(np.full(97, 40.0), g)
    np.testing.assert_array_equal(s[:-1], 0.0)
    assert np.isnan(s[-1])


def test_kernel_volatility_empty_window_is_nan():
    g = TimeGrid(24, 96)
    P = np.arange(97.0)
    s = kernel_volatility(P, g, h=0.08, at=[0.1, 0.25, 24.0])
    assert np.isnan(s[0]) and np.isfinite(s[1])
    assert np.isnan(s[2])  # no increment starts within h before T


def test_kernel_volatility_rejects_bad_input():
    g = TimeGrid(24, 96)
    with pytest.raises(DomainError):
        kernel_volatility(np.zeros(97), g, h=0.0)
    with pytest.raises(DomainError):
        kernel_volatility(np.zeros(50), g)


def test_kernel_volatility_matches_direct_formula():
    rng = np.random.default_rng(0)
    t = np.sort(rng.uniform(0, 2, 40))
    P = rng.standard_normal(40).cumsum()
    h, at = 0.3, 1.1
    num = den = 0.0
    for i in range(1, 40):
        k = 0.75 * max(0.0, 1 - ((t[i - 1] - at) / h) ** 2) / h
        num += k * (P[i] - P[i - 1]) ** 2
        den += k * (t[i] - t[i - 1])
    assert kernel_volatility(P, t, h, at=at)[0] == pytest.approx(np.sqrt(num / den), rel=1e-12)


def test_kernel_volatility_shift_and_scale():
    g = TimeGrid(24, 96)
    P = np.random.default_rng(1).standard_normal((3, 97)).cumsum(axis=-1)
    base = kernel_volatility(P, g)
    np.testing.assert_allclose(kernel_volatility(P + 17.0, g), base, rtol=1e-9)
    np.testing.assert_allclose(kernel_volatility(2.5 * P, g), 2.5 * base, rtol=1e-12)


@pytest.mark.parametrize("n_steps", [96, 1440])
def test_kernel_volatility_calibrates_on_abm(n_steps):
    g = TimeGrid(24, n_steps)
    rng = np.random.default_rng(7)
    P = 40 + np.concatenate([np.zeros((1000, 1)), (10 * np.sqrt(g.dt) * rng.standard_normal((1000, n_steps))).cumsum(-1)], -1)
    avg = average_volatility(kernel_volatility(P, g))
    interior = (g.times > 0.08) & (g.times < 24 - 0.08)
    np.testing.assert_allclose(avg[interior], 10.0, rtol=0.10)


def test_average_volatility_modes():
    s = np.array([[3.0, 0.0], [4.0, 0.0]])
    np.testing.assert_allclose(average_volatility(s), [np.sqrt(12.5), 0.0])
    np.testing.assert_allclose(average_volatility(s, how="mean"), [3.5, 0.0])
    with pytest.raises(DomainError):
        average_volatility(s, how="median")


# correlation -----------------------------------------------------------------

def test_correlation_of_copy_is_one():
    dP = np.random.default_rng(2).standard_normal((200, 10))
    c = increment_correlation(dP.copy(), dP)
    np.testing.assert_allclose(c.rho, 1.0)
    np.testing.assert_allclose(c.ci_lo, 1.0)


def test_correlation_of_independent_noise_within_ci():
    rng = np.random.default_rng(3)
    c = increment_correlation(rng.standard_normal((5000, 40)), rng.standard_normal((5000, 40)))
    inside = (c.ci_lo <= 0) & (0 <= c.ci_hi)
    assert inside.mean() >= 0.85
    assert np.all(np.abs(c.rho) <= 1)


def test_correlation_zero_variance_is_nan():
    dY = np.zeros((10, 3))
    dY[:, 1] = np.arange(10)
    c = increment_correlation(dY, np.random.default_rng(4).standard_normal((10, 3)))
    assert np.isnan(c.rho[0]) and np.isnan(c.rho[2]) and np.isfinite(c.rho[1])


def test_correlation_needs_two_scenarios():
    with pytest.raises(DomainError):
        increment_correlation(np.zeros((1, 3)), np.zeros((1, 3)))


def test_correlation_scale_invariant_and_windows():
    g = TimeGrid(24, 96)
    rng = np.random.default_rng(5)
    Y = rng.standard_normal((300, 97)).cumsum(-1)
    P = 0.5 * Y + rng.standard_normal((300, 97)).cumsum(-1)
    c = price_forecast_correlation(P, Y, g, window=0.25)
    assert c.rho.size == 96 and c.t[1] == 0.25
    np.testing.assert_allclose(price_forecast_correlation(3 * P + 1, Y, g).rho, c.rho, rtol=1e-10)
    assert price_forecast_correlation(P, Y, g, window=1.0).rho.size == 24
    with pytest.raises(DomainError):
        price_forecast_correlation(P, Y, g, window=0.3)


# csv -------------------------------------------------------------------------

def test_csv_round_trip_and_headers():
    text = write_volatility([0.0, 0.25], [1.5, np.nan])
    assert text.splitlines()[0] == "t,sigma_hat"
    t, v = read_series(io.StringIO("t,value\n0.0,1.0\n0.25,2.0\n"))
    np.testing.assert_array_equal(v, [1.0, 2.0])
    with pytest.raises(DomainError):
        read_series(io.StringIO("time,x\n0,1\n"))
    c = increment_correlation(np.eye(5), np.eye(5))
    assert c.to_csv().splitlines()[0] == "t,rho,ci_lo,ci_hi"
