"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Every criterion is a pure function returning its verdict, runtime and the
CSV files it produced; the reproducibility criterion reruns all of them and
compares the CSV bytes.  Summary lines are collected in ``SUMMARY`` and
printed by the terminal-summary hook in ``conftest.py``.
"""

import functools
import time
from dataclasses import dataclass, field, replace
from typing import Dict

import numpy as np
import pytest

from intraday_mfg import cli, homogeneous, oracle, stackelberg
from intraday_mfg.estimators import average_volatility, epanechnikov, kernel_volatility
from intraday_mfg.grid import TimeGrid
from intraday_mfg.kernels import KernelTable, MarketParams
from intraday_mfg.nplayer import epsilon_nash_study
from intraday_mfg.scenarios import deterministic_scenario, ensemble_batch, write_columns

SUMMARY: Dict[int, str] = {}
GRID = TimeGrid(24.0, 96)
STACKELBERG = MarketParams().with_weights(0.5, 0.5)


@dataclass
class Outcome:
    passed: bool
    detail: str
    runtime: float = 0.0
    limit: float = float("inf")
    csv: Dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.passed and self.runtime < self.limit


def _timed(limit):
    def wrap(fn):
        @functools.wraps(fn)
        def inner():
            start = time.perf_counter()
            out = fn()
            out.runtime = time.perf_counter() - start
            out.limit = limit
            return out

        return inner

    return wrap


def _sup(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# 1 -------------------------------------------------------------------------

def _oracle_gap(params, grid):
    eq = stackelberg.solve(deterministic_scenario(params, grid), params)
    bvp = oracle.deterministic_bvp(params, params.S0, grid=grid)
    mvec = np.broadcast_to(bvp.Mvec, eq.Mvec.shape)
    return max(_sup(eq.Xi, bvp.Xi), _sup(eq.Mvec, mvec)), eq


@_timed(1.0)
def criterion_1():
    p = STACKELBERG.replace(sigma_S=0.0, sigma_bar=0.0, sigma_0=0.0, sigma_X=0.0)
    g96, _ = _oracle_gap(p, GRID)
    g192, _ = _oracle_gap(p, GRID.refine())
    csv = write_columns(["n_steps", "sup_gap"], [[96, 192], [g96, g192]])
    return Outcome(g96 <= 1e-6 and g192 < g96, f"sup gap {g96:.1e} (96 steps) -> {g192:.1e} (192 steps)", csv={"c1_oracle_gap.csv": csv})


# 2 -------------------------------------------------------------------------

@_timed(1.0)
def criterion_2():
    p = MarketParams()  # a0 = 0
    table = KernelTable.build(p, GRID)
    scen = ensemble_batch(p, GRID, 0, 20, 11)
    eq = stackelberg.solve(scen, p, table)
    hom = homogeneous.equilibrium(scen, p, agent_index=None, table=table)
    gaps = np.max(np.abs(eq.phibar - hom.phi_bar), axis=-1)
    csv = write_columns(["scenario", "sup_gap"], [np.arange(gaps.size), gaps])
    return Outcome(bool(gaps.max() <= 1e-6), f"max path-wise gap {gaps.max():.1e} over 20 scenarios", csv={"c2_homogeneous.csv": csv})


# 3 -------------------------------------------------------------------------

@_timed(10.0)
def criterion_3():
    table = KernelTable.build(STACKELBERG, GRID)
    scen = ensemble_batch(STACKELBERG, GRID, 0, 100, 3)
    a = stackelberg.solve(scen, STACKELBERG, table)
    b = stackelberg.solve_martingale_form(scen, STACKELBERG, table)
    gaps = np.maximum(np.abs(a.Xi - b.Xi).max(axis=(-1, -2)), np.abs(a.Mvec - b.Mvec).max(axis=(-1, -2)))
    csv = write_columns(["scenario", "sup_gap"], [np.arange(gaps.size), gaps])
    return Outcome(bool(gaps.max() <= 1e-9), f"max gap {gaps.max():.1e} over 100 scenarios", csv={"c3_forms.csv": csv})


# 4 -------------------------------------------------------------------------

@_timed(60.0)
def criterion_4():
    scen = ensemble_batch(STACKELBERG, GRID, 0, 1000, 4)
    big = STACKELBERG.replace(lam=1e6, lam0=1e6)
    gap_inf = _sup(stackelberg.solve(scen, big).Xi[..., :-1, :], stackelberg.limit_infinite_penalty(scen, big).Xi[..., :-1, :])
    none = STACKELBERG.replace(lam=0.0, lam0=0.0)
    gap_zero = _sup(stackelberg.solve(scen, none).Xi, stackelberg.limit_no_penalty(scen, none).Xi)
    lams, err0, errbar = [1e2, 1e4, 1e6], [], []
    for lam in lams:
        eq = stackelberg.solve(scen, STACKELBERG.replace(lam=lam, lam0=lam))
        err0.append(float(np.mean((eq.phi0[:, -1] - scen.X0[:, -1]) ** 2)))
        errbar.append(float(np.mean((eq.phibar[:, -1] - scen.Xbar[:, -1]) ** 2)))
    monotone = all(np.diff(err0) < 0) and all(np.diff(errbar) < 0)
    ok = gap_inf <= 1e-3 and gap_zero <= 1e-9 and monotone
    csv = write_columns(["lam", "tracking_major", "tracking_mean_field"], [lams, err0, errbar])
    detail = f"infinite-penalty gap {gap_inf:.1e}, no-penalty gap {gap_zero:.1e}, tracking monotone: {monotone}"
    return Outcome(ok, detail, csv={"c4_tracking.csv": csv})


# 5 -------------------------------------------------------------------------

@_timed(300.0)
def criterion_5():
    table = KernelTable.build(STACKELBERG, GRID)
    scen = ensemble_batch(STACKELBERG, GRID, 1, 10_000, 5)
    eq = stackelberg.solve(scen, STACKELBERG, table)
    mart = oracle.martingale_residual_test({"M0": eq.M0, "M": eq.M, "Ybar": eq.Ybar}, scen)
    phi_i = stackelberg.minor_strategy(scen, STACKELBERG, eq, 0, table)
    foc = oracle.foc_test(eq, scen, STACKELBERG, 20, seed=5, minor_paths=phi_i, table=table)
    Xi = eq.Xi.copy()
    Xi[..., 2] += 1.0
    bad = oracle.foc_test(replace(eq, Xi=Xi), scen, STACKELBERG, 20, seed=5, table=table, major=False)
    ok = mart.passed and foc.passed and not bad.passed
    worst = max(abs(r.z) for r in mart.rows + foc.rows)
    detail = (
        f"martingale {'PASS' if mart.passed else 'FAIL'}, FOC {'PASS' if foc.passed else 'FAIL'} "
        f"(max |z| {worst:.2f}), perturbed detected: {not bad.passed}"
    )
    return Outcome(ok, detail, csv={"c5_martingale.csv": mart.to_csv(), "c5_foc.csv": foc.to_csv(), "c5_perturbed.csv": bad.to_csv()})


# 6 -------------------------------------------------------------------------

@_timed(1800.0)
def criterion_6():
    rep = epsilon_nash_study(STACKELBERG, GRID, Ns=(4, 16, 64, 256), n_sim=10_000, base_seed=6)
    slopes = ", ".join(f"{k} {v:.2f}" for k, v in rep.slopes.items())
    over = [r for r in rep.rows if r.gain > rep.bound(r.N) + 3 * r.se]
    detail = f"slopes {slopes}; C = {rep.C:.0f}; gains above bound: {len(over)}"
    return Outcome(rep.passed, detail, csv={"c6_epsnash.csv": rep.to_csv()})


# 7 -------------------------------------------------------------------------

def _config(**over):
    return cli.load_config(overrides={k.replace("__", "."): str(v) for k, v in over.items()}, env={})


@_timed(600.0)
def criterion_7():
    config = _config(estimators__volatility_n_sim=1000, estimators__weight_presets="0.9:0.1, 0.5:0.5, 0.0:1.0")
    curves = cli.volatility_curves(config)
    t = GRID.times
    hi, mid, lo = (curves[w][1] for w in ((0.9, 0.1), (0.5, 0.5), (0.0, 1.0)))
    interior = (t > 0) & (t < GRID.T)
    ordered = float(np.mean((hi >= mid)[interior] & (mid >= lo)[interior]))
    last = (t >= 0.75 * GRID.T) & interior
    slopes = [float(np.polyfit(t[last], c[last], 1)[0]) for c in (hi, mid, lo)]
    ok = ordered >= 0.9 and all(s > 0 for s in slopes)
    csv = {f"c7_volatility_{cli._preset_name(*w)}.csv": cli.write_volatility(*curves[w]) for w in curves}
    detail = f"ordered at {ordered:.0%} of interior times (need 90%); final-quarter slopes {', '.join(f'{s:+.2f}' for s in slopes)}"
    return Outcome(ok, detail, csv=csv)


# 8 -------------------------------------------------------------------------

@_timed(1800.0)
def criterion_8():
    major, total = cli.correlation_paths(_config(estimators__correlation_n_sim=50_000, scenarios__seed=8))
    a, b = np.abs(major.rho), np.abs(total.rho)
    frac = float(np.mean(a <= b))
    gap = b - a
    q = gap.size // 4
    first, last = float(gap[:q].mean()), float(gap[-q:].mean())
    ok = frac >= 0.9 and last < first
    detail = f"|rho_major| <= |rho_total| in {frac:.0%} of windows; mean gap first quarter {first:.3f}, last quarter {last:.3f}"
    return Outcome(ok, detail, csv={"c8_correlation_major.csv": major.to_csv(), "c8_correlation_total.csv": total.to_csv()})


# 9 -------------------------------------------------------------------------

@_timed(60.0)
def criterion_9():
    p = MarketParams(sigma_S=10.0)
    S = ensemble_batch(p, GRID, 0, 1000, 9).S
    avg = average_volatility(kernel_volatility(S, GRID))
    interior = (GRID.times > 0) & (GRID.times < GRID.T)
    worst = float(np.max(np.abs(avg[interior] / 10.0 - 1.0)))
    k0 = float(epanechnikov(0.0))
    ok = worst <= 0.10 and k0 == 0.75
    return Outcome(ok, f"max relative error {worst:.1%} (need 10%); K(0) = {k0}", csv={"c9_calibration.csv": cli.write_volatility(GRID.times, avg)})


CRITERIA = {
    1: criterion_1,
    2: criterion_2,
    3: criterion_3,
    4: criterion_4,
    5: criterion_5,
    6: criterion_6,
    7: criterion_7,
    8: criterion_8,
    9: criterion_9,
}


@functools.lru_cache(maxsize=None)
def first_run(k: int) -> Outcome:
    return CRITERIA[k]()


def _report(k: int, out: Outcome):
    verdict = "PASS" if out.ok else "FAIL"
    SUMMARY[k] = f"criterion {k:>2}: {verdict}  ({out.runtime:.1f} s, limit {out.limit:.0f} s)  {out.detail}"


@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(k):
    out = first_run(k)
    _report(k, out)
    assert out.passed, out.detail
    assert out.runtime < out.limit, f"runtime {out.runtime:.1f} s exceeds {out.limit} s"


def test_criterion_10_reproducibility():
    start = time.perf_counter()
    mismatched = []
    for k, fn in CRITERIA.items():
        again = fn()
        before = first_run(k).csv
        if again.csv.keys() != before.keys() or any(again.csv[n] != before[n] for n in before):
            mismatched.append(k)
    runtime = time.perf_counter() - start
    n_files = sum(len(first_run(k).csv) for k in CRITERIA)
    detail = f"{n_files} CSV files rerun, byte-identical except criteria {mismatched}" if mismatched else f"{n_files} CSV files byte-identical on rerun"
    SUMMARY[10] = f"criterion 10: {'PASS' if not mismatched else 'FAIL'}  ({runtime:.1f} s)  {detail}"
    assert not mismatched
