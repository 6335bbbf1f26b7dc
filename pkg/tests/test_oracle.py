from dataclasses import replace

import numpy as np
import pytest

from intraday_mfg import oracle
from intraday_mfg import stackelberg as st
from intraday_mfg.errors import DomainError
from intraday_mfg.grid import TimeGrid
from intraday_mfg.kernels import WEIGHT_PRESETS, KernelTable, MarketParams
from intraday_mfg.scenarios import ScenarioPath, ensemble_batch


@pytest.mark.parametrize("weights", WEIGHT_PRESETS)
def test_bvp_terminal_map_and_affinity(weights):
    p = MarketParams().with_weights(*weights)
    state = oracle.deterministic_bvp(p, 40.0, X0_T=12.0, Xbar_T=-7.0)
    scale = max(1.0, np.abs(state.Mvec).max())
    assert state.newton_update <= oracle.NEWTON_AFFINE_RTOL * scale
    phi0, N, phibar = state.Xi[-1]
    m0, m, ybar = state.Mvec
    a, a0, lam, lam0 = p.a, p.a0, p.lam, p.lam0
    tol = 1e-6 * max(scale, np.abs(state.Xi).max())
    assert abs(m0 - (a0 * N + a0 * phi0 + lam0 * (phi0 - 12.0))) <= tol
    assert abs(m - (a * phi0 + (a + lam) * N)) <= tol
    assert abs(ybar - lam * (phibar + 7.0)) <= tol
    assert state.N[0] == 0.0


def test_bvp_rejects_bad_input():
    p = MarketParams()
    with pytest.raises(DomainError):
        oracle.deterministic_bvp(p, 40.0, substeps=4)
    with pytest.raises(DomainError):
        oracle.deterministic_bvp(p, 40.0, grid=TimeGrid(12.0, 48))


def test_bvp_zero_data():
    state = oracle.deterministic_bvp(MarketParams().with_weights(0.5, 0.5), 0.0)
    assert np.abs(state.Xi).max() == 0.0


def test_bvp_csv(tmp_path):
    state = oracle.deterministic_bvp(MarketParams().with_weights(0.5, 0.5), 40.0)
    text = oracle.bvp_to_csv(state, tmp_path / "bvp.csv")
    assert text.splitlines()[0].startswith("t,phi0,N,phibar")
    assert (tmp_path / "bvp.csv").read_text() == text


def _brownian_batch(grid, n_sim, seed=0):
    p = MarketParams()
    return ensemble_batch(p, grid, 0, n_sim, base_seed=seed)


def test_martingale_test_calibration(grid):
    batch = _brownian_batch(grid, 4000, seed=3)
    good = oracle.martingale_residual_test({"S": batch.S, "Xbar": batch.Xbar}, batch)
    assert good.passed, good.text()
    drifted = batch.S + grid.times
    bad = oracle.martingale_residual_test({"S+t": drifted}, batch)
    failed = {row.name for row in bad.failures()}
    assert "const" in failed


def test_martingale_test_shape_checks(grid):
    batch = _brownian_batch(grid, 10)
    with pytest.raises(DomainError):
        oracle.martingale_residual_test({"x": np.zeros((10, 5))}, batch)
    with pytest.raises(DomainError):
        oracle.martingale_residual_test({"x": batch.S[0]}, batch.member(0))


def test_zero_test_process_gives_zero():
    running = np.random.default_rng(0).normal(size=(5, 8))
    vals = oracle._foc_functional(np.zeros((5, 8)), running, np.ones(5), 0.25)
    assert np.all(vals == 0.0)


def test_report_formats():
    rep = oracle.Report("demo", [oracle.TestRow("g", "x", 1.0, 0.5), oracle.TestRow("g", "y", 2.0, 0.5)])
    assert not rep.passed and [r.name for r in rep.failures()] == ["y"]
    assert rep.text().splitlines()[0] == "demo: FAIL"
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "test,name,estimate,se,z,passed"
    assert csv_text.splitlines()[2].endswith(",4.0,0.0")


@pytest.fixture(scope="module")
def foc_setup():
    p = MarketParams().with_weights(0.5, 0.5)
    g = TimeGrid(24.0, 96)
    batch = ensemble_batch(p, g, 1, 3000, base_seed=11)
    tab = KernelTable.build(p, g)
    eq = st.solve(batch, p, tab)
    return p, batch, tab, eq


def test_foc_passes_at_equilibrium(foc_setup):
    p, batch, tab, eq = foc_setup
    phi = st.minor_strategy(batch, p, eq, 0, tab)
    rep = oracle.foc_test(eq, batch, p, n_test_processes=10, seed=1, minor_paths=phi, table=tab)
    assert rep.passed, rep.text()
    assert {r.test for r in rep.rows} == {"minor-mean", "minor-agent", "major"}


@pytest.mark.parametrize("component", [0, 2])
def test_foc_detects_perturbation(foc_setup, component):
    p, batch, tab, eq = foc_setup
    Xi = eq.Xi.copy()
    Xi[..., component] += 1.0
    rep = oracle.foc_test(replace(eq, Xi=Xi), batch, p, n_test_processes=10, seed=1, table=tab)
    assert not rep.passed


def test_foc_needs_batch(foc_setup):
    p, batch, tab, eq = foc_setup
    one = batch.member(0)
    with pytest.raises(DomainError):
        oracle.foc_test(st.solve(one, p, tab), one, p, table=tab)


def test_homogeneous_equilibrium_through_stackelberg_foc():
    """The identical-agents game is the a0 = 0 case; its aggregate passes too."""
    p = MarketParams()
    g = TimeGrid(24.0, 96)
    batch = ensemble_batch(p, g, 1, 2000, base_seed=5)
    tab = KernelTable.build(p, g)
    eq = st.solve(batch, p, tab)
    rep = oracle.foc_test(eq, batch, p, n_test_processes=8, seed=2, table=tab)
    assert rep.passed, rep.text()
