import numpy as np
import pytest

from intraday_mfg import stackelberg as st
from intraday_mfg.errors import DomainError
from intraday_mfg.grid import TimeGrid
from intraday_mfg.homogeneous import equilibrium as homogeneous_equilibrium
from intraday_mfg.kernels import WEIGHT_PRESETS, KernelTable, LiquiditySchedule, MarketParams
from intraday_mfg.oracle import deterministic_bvp, martingale_residual_test, ode_residual
from intraday_mfg.scenarios import ScenarioPath, deterministic_scenario, ensemble_batch, simulate


def zero_scenario(grid):
    z = np.zeros(grid.n_points)
    return ScenarioPath(grid, z, z, z, np.zeros((1, grid.n_points)))


def sup(x):
    return float(np.max(np.abs(x)))


def test_zero_data(grid, params, table):
    sc = zero_scenario(grid)
    for solver in (st.solve, st.solve_martingale_form, st.limit_no_penalty):
        eq = solver(sc, params, table)
        assert sup(eq.Xi) == 0.0 and sup(eq.price) == 0.0
    ups, ups_t = st.upsilon(sc, params, table)
    assert sup(ups) == 0.0 and sup(ups_t) == 0.0


def test_upsilon_tower_property(grid, params, table):
    sc = simulate(params, grid, 0, seed=3)
    ups, ups_t = st.upsilon(sc, params, table)
    np.testing.assert_allclose(ups_t[-1], ups[-1], rtol=1e-14)


def test_structural_identities(grid, params, table):
    sc = simulate(params, grid, 2, seed=8)
    eq = st.solve(sc, params, table)
    assert eq.N[0] == 0.0
    np.testing.assert_allclose(eq.price, sc.S + params.a * eq.phibar + params.a0 * eq.phi0, rtol=0, atol=1e-12)
    scale = max(sup(eq.Mvec), 1.0)
    a, a0, lam, lam0 = params.a, params.a0, params.lam, params.lam0
    T = -1
    assert abs(eq.M0[T] - (a0 * eq.N[T] + a0 * eq.phi0[T] + lam0 * (eq.phi0[T] - sc.X0[T]))) <= 1e-9 * scale
    assert abs(eq.M[T] - (a * eq.phi0[T] + (a + lam) * eq.N[T])) <= 1e-9 * scale
    assert abs(eq.Ybar[T] - lam * (eq.phibar[T] - sc.Xbar[T])) <= 1e-9 * scale


@pytest.mark.parametrize("weights", WEIGHT_PRESETS)
def test_deterministic_matches_oracle(weights):
    p = MarketParams().with_weights(*weights)
    gaps = []
    for n in (96, 192):
        g = TimeGrid(24.0, n)
        eq = st.solve(deterministic_scenario(p, g), p)
        bvp = deterministic_bvp(p, np.full(g.n_points, p.S0), grid=g)
        gaps.append(sup(eq.Xi - bvp.Xi))
    assert gaps[0] <= 1e-6
    assert gaps[1] < gaps[0]


def test_deterministic_drift_matches_oracle(grid, params):
    S = 40.0 + 5.0 * np.sin(grid.times / 3.0)
    p = params.replace(X0_0=30.0, Xbar0=-20.0)
    sc = deterministic_scenario(p, grid, S=S)
    eq = st.solve(sc, p)
    bvp = deterministic_bvp(p, S, X0_T=30.0, Xbar_T=-20.0, grid=grid)
    assert sup(eq.Xi - bvp.Xi) <= 1e-6 * max(1.0, sup(bvp.Xi))


def test_martingale_form_rejects_drift(grid, params):
    sc = deterministic_scenario(params, grid, S=40.0 + grid.times)
    with pytest.raises(DomainError):
        st.solve_martingale_form(sc, params)


@pytest.mark.parametrize("weights", WEIGHT_PRESETS)
def test_martingale_form_agrees(grid, weights):
    p = MarketParams().with_weights(*weights)
    batch = ensemble_batch(p, grid, 0, 20, base_seed=123)
    tab = KernelTable.build(p, grid)
    a = st.solve(batch, p, tab)
    b = st.solve_martingale_form(batch, p, tab)
    assert sup(a.Xi - b.Xi) <= 1e-9


def test_homogeneous_consistency(grid):
    p = MarketParams().with_weights(0.0, 1.0)
    batch = ensemble_batch(p, grid, 1, 10, base_seed=31)
    a = st.solve(batch, p)
    b = homogeneous_equilibrium(batch, p)
    assert sup(a.phibar - b.phi_bar) <= 1e-6


def test_no_penalty_limit(grid, params):
    p = params.replace(lam=0.0, lam0=0.0)
    batch = ensemble_batch(p, grid, 0, 5, base_seed=2)
    a = st.solve(batch, p)
    b = st.limit_no_penalty(batch, params)
    assert sup(a.Xi - b.Xi) <= 1e-9
    # forecasts drop out without penalties
    shifted = ScenarioPath(grid, batch.S, batch.Xbar + 100.0, batch.X0 - 50.0, batch.Xcheck)
    np.testing.assert_array_equal(st.limit_no_penalty(shifted, params).Xi, b.Xi)


def test_no_penalty_constant_price_cross_formula(grid, params):
    p = params.replace(lam=0.0, lam0=0.0, sigma_S=0.0)
    sc = deterministic_scenario(p, grid)
    a = st.solve_martingale_form(sc, p)
    b = st.limit_no_penalty(sc, p)
    assert sup(a.Xi - b.Xi) <= 1e-9 * max(1.0, sup(b.Xi))
    bvp = deterministic_bvp(p, sc.S, grid=grid)
    assert sup(b.Xi - bvp.Xi) <= 1e-6


def test_infinite_penalty_limit(grid, params):
    batch = ensemble_batch(params, grid, 0, 20, base_seed=17)
    tab = KernelTable.build(params, grid)
    lim = st.limit_infinite_penalty(batch, params, tab)
    np.testing.assert_array_equal(lim.phi0[:, -1], batch.X0[:, -1])
    np.testing.assert_array_equal(lim.phibar[:, -1], batch.Xbar[:, -1])
    assert np.all(np.isnan(lim.Mvec))
    mform = st.limit_infinite_penalty(batch, params, tab, martingale_form=True)
    assert sup(lim.Xi - mform.Xi) <= 1e-9
    big = st.solve(batch, params.replace(lam=1e6, lam0=1e6))
    assert sup(big.Xi[:, :-1] - lim.Xi[:, :-1]) <= 1e-3


def test_infinite_penalty_zero_forecasts(grid, params):
    sc = deterministic_scenario(params.replace(sigma_S=0.0), grid)
    eq = st.limit_infinite_penalty(sc, params, martingale_form=True)
    assert sup(eq.Xi) <= 1e-9


def test_terminal_tracking_improves(grid, params):
    batch = ensemble_batch(params, grid, 0, 1000, base_seed=1)
    e0, e1 = [], []
    for lam in (1e2, 1e4, 1e6):
        eq = st.solve(batch, params.replace(lam=lam, lam0=lam))
        e0.append(np.mean((eq.phi0[:, -1] - batch.X0[:, -1]) ** 2))
        e1.append(np.mean((eq.phibar[:, -1] - batch.Xbar[:, -1]) ** 2))
    assert e0[0] > e0[1] > e0[2] and e1[0] > e1[1] > e1[2]


def test_minor_strategy_cases(grid, params, table):
    batch = ensemble_batch(params, grid, 3, 4, base_seed=6)
    eq = st.solve(batch, params, table)
    quiet = ScenarioPath(grid, batch.S, batch.Xbar, batch.X0, np.zeros_like(batch.Xcheck))
    np.testing.assert_array_equal(st.minor_strategy(quiet, params, eq, 1, table), eq.phibar)
    p0 = params.replace(lam=0.0)
    eq0 = st.solve(batch, p0)
    np.testing.assert_array_equal(st.minor_strategy(batch, p0, eq0, 0), eq0.phibar)
    with pytest.raises(DomainError):
        st.minor_strategy(batch, params, eq, 3, table)


def test_minor_average_converges_to_aggregate():
    p = MarketParams(liquidity=LiquiditySchedule(0.0, 2.0, 0.0, 2.0, 24.0)).with_weights(0.5, 0.5)
    g = TimeGrid(24.0, 96)
    sc = simulate(p, g, 256, seed=12)
    eq = st.solve(sc, p)
    rms = []
    for n in (16, 64, 256):
        paths = np.array([st.minor_strategy(sc, p, eq, i) for i in range(n)])
        rms.append(np.sqrt(np.mean((paths.mean(axis=0) - eq.phibar) ** 2)))
    # rate ~ N^{-1/2}: a factor 4 in N roughly halves the error
    assert rms[2] < rms[0]
    slope = np.polyfit(np.log([16, 64, 256]), np.log(rms), 1)[0]
    assert -0.8 < slope < -0.25


def _ode_residuals(params, n):
    g = TimeGrid(24.0, n)
    sc = deterministic_scenario(params, g)
    res = np.abs(ode_residual(st.solve(sc, params), sc, params))
    return res, g.times[:-1]


def test_ode_residual_is_first_order(params):
    """Forward-difference residual halves away from the delivery boundary layer."""
    res = [_ode_residuals(params, n) for n in (96, 192, 384)]
    away = [r[t < 20.0].max() for r, t in res]
    for coarse, fine in zip(away, away[1:]):
        assert 0.4 <= fine / coarse <= 0.6


@pytest.mark.slow
def test_ode_residual_sup_decreases(params):
    # alpha(T) = 0.1 makes a layer of width ~ dt at T; the full sup norm is
    # still pre-asymptotic on these grids but decreases under refinement
    sups = [_ode_residuals(params, n)[0].max() for n in (192, 384, 768)]
    assert sups[0] > sups[1] > sups[2]


def test_reconstructed_martingales(grid, params, table):
    batch = ensemble_batch(params, grid, 0, 10_000, base_seed=2024)
    eq = st.solve(batch, params, table)
    report = martingale_residual_test({"M0": eq.M0, "M": eq.M, "Ybar": eq.Ybar}, batch)
    assert report.passed, report.text()
    _, ups_t = st.upsilon(batch, params, table)
    report = martingale_residual_test({f"Ut{i}": ups_t[..., i] for i in range(3)}, batch)
    assert report.passed, report.text()


def test_rejects_vanishing_costs(grid):
    p = MarketParams(liquidity=LiquiditySchedule(0.0, 1e-10, 0.0, 1.0, 24.0))
    with pytest.raises(DomainError):
        st.solve(zero_scenario(grid), p)


def test_table_parameter_mismatch(grid, params, table):
    with pytest.raises(DomainError):
        st.solve(zero_scenario(grid), params.with_weights(0.9, 0.1), table)


def test_csv_export(grid, params, table):
    sc = simulate(params, grid, 2, seed=1)
    eq = st.solve(sc, params, table)
    phi = st.minor_strategy(sc, params, eq, 1, table)
    from dataclasses import replace

    text = replace(eq, phi_i=phi[None, :]).to_csv()
    header = text.splitlines()[0]
    assert header.startswith("t,phi0,N,phibar,price,M0,M,Ybar")
    assert len(text.splitlines()) == grid.n_points + 1
