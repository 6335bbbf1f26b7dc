"""Finite-population game: objectives, the epsilon-Nash profile and deviation gains.

With ``N`` minor agents the price is ``P^N = S + a phibar^N + a0 phi0`` where
``phibar^N`` is the empirical mean of the minor positions.  The profile built
here lets the major agent follow the mean field leader strategy and minor
agent ``i`` follow ``phibar* + psi^i`` (idiosyncratic tracking of its own
forecast on top of the mean field aggregate).

Everything lives in the exact-cell model used by :mod:`stackelberg`: the
information set is frozen on each cell ``[t_k, t_{k+1})``, the price is
``S_k`` there and the forecasts read ``X_{k+1}``.  Positions are absolutely
continuous inside a cell, so objectives are integrated with Gauss-Legendre
nodes whenever the in-cell paths are known (profiles from
:func:`build_eps_nash_profile`), and by the left-point rule otherwise.

Deviation gains
---------------
*Minor.*  Against fixed opponents, agent ``i`` faces the exogenous price
``S~ = S + a0 phi0 + (a/N) sum_{j != i} phi^j`` and its own impact ``a/N``;
the latter integrates to ``(a / 2N) phi_T^2``, i.e. a terminal penalty
``lam' = lam + a/N`` around the target ``lam X / lam'``.  The exact best
response is computed cell by cell (full information: the deviator observes
every forecast) and the gain follows from the quadratic identity
``J(best) - J(phi) = E[int alpha/2 (dphi - dbest)^2 dt + lam'/2 (phi_T - best_T)^2]``.

*Major.*  After a leader deviation the minors re-respond with the exact
``N``-player aggregate dynamics, which are the mean field equations with
impact ``a (N - 1) / N`` and penalty ``lam + a/N``.  The leader objective
is linear in ``phibar^N``, so it is evaluated on the projection of
``phibar^N`` onto the common information, which removes the idiosyncratic
noise without bias.  Deviations are the ``N``-optimal leader strategy plus
bumps and forecast-proportional tilts of the trading rate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DomainError
from .grid import TimeGrid
from .homogeneous import forecast_increments, idiosyncratic_position
from .kernels import KernelTable, MarketParams, impact_matrix
from .scenarios import ScenarioPath, ensemble_batch
from .stackelberg import E_VEC, StackelbergEquilibrium, solve

__all__ = [
    "Estimate",
    "CellDetail",
    "StrategyProfile",
    "DeviationSpec",
    "DEFAULT_MAJOR_DEVIATIONS",
    "objective_minor",
    "objective_major",
    "build_eps_nash_profile",
    "minor_deviation_gain",
    "major_deviation_gain",
    "aggregate_response",
    "GainRow",
    "EpsNashReport",
    "epsilon_nash_study",
]

GL_Q = 8
VARIANCE_TOLERANCE = 0.10
SLOPE_LIMIT = -0.4


@dataclass(frozen=True)
class Estimate:
    """Ensemble mean with its standard error and the per-scenario values."""

    mean: float
    se: float
    values: np.ndarray

    @classmethod
    def of(cls, values) -> "Estimate":
        v = np.atleast_1d(np.asarray(values, dtype=float)).ravel()
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        return cls(float(v.mean()), se, v)


@dataclass(frozen=True)
class CellDetail:
    """In-cell paths at the Gauss-Legendre nodes of every cell, shape ``(..., n, q)``.

    Minor agent ``i`` trades at ``base_rate + news[..., i, :, None] / alpha``
    inside a cell; ``phibar`` is the population mean ``phibar^N`` and
    ``phibar_mf`` the mean field aggregate.
    """

    phi0: np.ndarray
    phi0_rate: np.ndarray
    phibar: np.ndarray
    phibar_mf: np.ndarray
    base_rate: np.ndarray
    news: np.ndarray

    @property
    def q(self) -> int:
        return self.phi0.shape[-1]


@dataclass(frozen=True)
class StrategyProfile:
    """Positions of the major agent ``(..., n + 1)`` and of ``N`` minors ``(..., N, n + 1)``."""

    grid: TimeGrid
    phi0: np.ndarray
    phi: np.ndarray
    phibar_mf: Optional[np.ndarray] = None
    cell: Optional[CellDetail] = None
    equilibrium: Optional[StackelbergEquilibrium] = field(default=None, repr=False)

    def __post_init__(self):
        n1 = self.grid.n_points
        phi0 = np.asarray(self.phi0, dtype=float)
        phi = np.asarray(self.phi, dtype=float)
        if phi0.shape[-1] != n1 or phi.shape[-1] != n1:
            raise DomainError("strategy paths do not match the grid")
        if phi.shape[:-2] != phi0.shape[:-1]:
            raise DomainError("major and minor paths have different batch shapes")
        object.__setattr__(self, "phi0", phi0)
        object.__setattr__(self, "phi", phi)

    @property
    def N(self) -> int:
        return self.phi.shape[-2]

    @property
    def phibar_N(self) -> np.ndarray:
        return self.phi.mean(axis=-2)

    def price(self, scenario: ScenarioPath, params: MarketParams) -> np.ndarray:
        """Finite-population price ``S + a phibar^N + a0 phi0`` on the grid."""
        return scenario.S + params.a * self.phibar_N + params.a0 * self.phi0

    def replace_minor(self, i: int, path) -> "StrategyProfile":
        """Profile with minor ``i`` switched to ``path`` (in-cell detail is dropped)."""
        phi = self.phi.copy()
        phi[..., i, :] = path
        return StrategyProfile(self.grid, self.phi0, phi, self.phibar_mf)

    def replace_major(self, path) -> "StrategyProfile":
        return StrategyProfile(self.grid, np.asarray(path, dtype=float), self.phi, self.phibar_mf)


# ---------------------------------------------------------------- objectives


def _nodes(params, grid, table, q):
    if table is None:
        table = KernelTable.build(params, grid)
    else:
        table.grid.check_same(grid)
    return table, table.cell_nodes(q)


def _left_point_running(path, price, cost, dt):
    rate = np.diff(path, axis=-1) / dt
    return ((0.5 * cost[:-1] * rate**2 + rate * price[..., :-1]) * dt).sum(axis=-1)


def objective_minor(
    i: int,
    profile: StrategyProfile,
    scenario: ScenarioPath,
    params: MarketParams,
    table: Optional[KernelTable] = None,
    *,
    mean_field: bool = False,
    use_cells: bool = True,
) -> Estimate:
    """``J^{N,i}`` of minor agent ``i`` (or its mean field counterpart).

    ``mean_field=True`` prices trades with the mean field aggregate instead
    of the empirical mean of the profile.
    """
    if not 0 <= i < profile.N:
        raise DomainError(f"minor index {i} outside 0..{profile.N - 1}")
    if i >= scenario.n_minor:
        raise DomainError(f"scenario holds {scenario.n_minor} minor forecasts, agent {i} requested")
    grid = profile.grid
    grid.check_same(scenario.grid)
    phi_i = profile.phi[..., i, :]
    target = scenario.X(i)
    if use_cells and profile.cell is not None:
        _, nodes = _nodes(params, grid, table, profile.cell.q)
        cell = profile.cell
        rate = cell.base_rate + cell.news[..., i, :, None] / nodes.alpha
        agg = cell.phibar_mf if mean_field else cell.phibar
        price = scenario.S[..., :-1, None] + params.a * agg + params.a0 * cell.phi0
        running = ((0.5 * nodes.alpha * rate**2 + rate * price) * nodes.w).sum(axis=(-1, -2))
    else:
        if mean_field and profile.phibar_mf is None:
            raise DomainError("profile carries no mean field aggregate")
        agg = profile.phibar_mf if mean_field else profile.phibar_N
        price = scenario.S + params.a * agg + params.a0 * profile.phi0
        running = _left_point_running(phi_i, price, params.alpha(grid.times), grid.dt)
    terminal = 0.5 * params.lam * (phi_i[..., -1] - target[..., -1]) ** 2
    return Estimate.of(-(running + terminal))


def objective_major(
    profile: StrategyProfile,
    scenario: ScenarioPath,
    params: MarketParams,
    table: Optional[KernelTable] = None,
    *,
    use_cells: bool = True,
) -> Estimate:
    """``J^{N,0}`` of the major agent under the finite-population price."""
    grid = profile.grid
    grid.check_same(scenario.grid)
    if use_cells and profile.cell is not None:
        _, nodes = _nodes(params, grid, table, profile.cell.q)
        cell = profile.cell
        price = scenario.S[..., :-1, None] + params.a * cell.phibar + params.a0 * cell.phi0
        running = (
            (0.5 * nodes.alpha0 * cell.phi0_rate**2 + cell.phi0_rate * price) * nodes.w
        ).sum(axis=(-1, -2))
    else:
        running = _left_point_running(
            profile.phi0, profile.price(scenario, params), params.alpha0(grid.times), grid.dt
        )
    terminal = 0.5 * params.lam0 * (profile.phi0[..., -1] - scenario.X0[..., -1]) ** 2
    return Estimate.of(-(running + terminal))


# --------------------------------------------------------- in-cell machinery


def _binv_nodes(nodes) -> np.ndarray:
    return np.stack([1.0 / nodes.alpha0, 1.0 / nodes.alpha, 1.0 / nodes.alpha], axis=-1)


def _forcing(eq: StackelbergEquilibrium, S: np.ndarray) -> np.ndarray:
    """Constant in-cell input ``c_k = M_k + e S_k`` of ``B Xi' + A Xi + c = 0``."""
    return eq.Mvec[..., :-1, :] + S[..., :-1, None] * E_VEC


def _cell_states(Xi, c, nodes, A):
    """State and rate of the leader system at the nodes, shape ``(..., n, q, 3)``."""
    X = np.einsum("kqab,...kb->...kqa", nodes.Tr, Xi[..., :-1, :]) - np.einsum(
        "kqab,...kb->...kqa", nodes.Pi, c
    )
    rate = -_binv_nodes(nodes) * (X @ A.T + c[..., None, :])
    return X, rate


def _future_kernels(table: KernelTable, nodes, weight: np.ndarray):
    """``K1, K2`` with ``E_k int_{t_k}^T weight(s) Xi_s ds = K1[k] Xi_k - K2[k] c_k``."""
    n = table.n
    wq = nodes.w * weight
    C1 = np.einsum("kq,kqab->kab", wq, nodes.Tr)
    C2 = np.einsum("kq,kqab->kab", wq, nodes.Pi)
    upper = np.triu(np.ones((n, n)))
    K1 = np.einsum("km,mab,kmbc->kac", upper, C1, table.Trans[:n, :n])
    K2 = np.einsum("km,mab,kmbc->kac", upper, C1, table.Pi[:n, :n])
    K2 += np.cumsum(C2[::-1], axis=0)[::-1]
    return K1, K2


def _idiosyncratic_news(Xcheck, table: KernelTable, lam: float):
    """Cumulative weighted news ``g_k = sum_{l<=k} w_l dX_l``; in cell k ``psi' = g_k / alpha``."""
    n = table.n
    w = lam / (1.0 + lam * table.DeltaTilde[:n, -1])
    return np.cumsum(forecast_increments(Xcheck)[..., :n] * w, axis=-1)


def _propagators(A, binv_fn, grid: TimeGrid, offsets, substeps: int = 64):
    """Cell transition ``Tr`` and input response ``Pi`` of ``B z' + A z + c = 0``.

    All cells are integrated at once with classical RK4; returns the kernels
    at ``t_k + offsets`` (shape ``(n, q, m, m)``) and at the cell ends.
    """
    n, dt, m = grid.n_steps, grid.dt, A.shape[0]
    t0 = grid.times[:-1]
    eye = np.eye(m)

    def rhs(s, tr, pi):
        b = binv_fn(t0 + s)[:, :, None]
        return -b * (A @ tr), -b * (A @ pi) + b * eye

    tr = np.broadcast_to(eye, (n, m, m)).copy()
    pi = np.zeros((n, m, m))
    out_tr, out_pi = [], []
    cur = 0.0
    for target in list(offsets) + [dt]:
        steps = max(1, math.ceil((target - cur) * substeps / dt))
        h = (target - cur) / steps
        for j in range(steps):
            s = cur + j * h
            a1, b1 = rhs(s, tr, pi)
            a2, b2 = rhs(s + h / 2, tr + h / 2 * a1, pi + h / 2 * b1)
            a3, b3 = rhs(s + h / 2, tr + h / 2 * a2, pi + h / 2 * b2)
            a4, b4 = rhs(s + h, tr + h * a3, pi + h * b3)
            tr = tr + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
            pi = pi + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
        out_tr.append(tr)
        out_pi.append(pi)
        cur = target
    return np.stack(out_tr[:-1], axis=1), np.stack(out_pi[:-1], axis=1), out_tr[-1], out_pi[-1]


def _flatten(scenario: ScenarioPath, eq: StackelbergEquilibrium):
    n1 = scenario.grid.n_points
    return (
        scenario.S.reshape(-1, n1),
        scenario.Xbar.reshape(-1, n1),
        scenario.X0.reshape(-1, n1),
        scenario.Xcheck.reshape((-1,) + scenario.Xcheck.shape[-2:]),
        eq.Xi.reshape(-1, n1, 3),
        eq.Mvec.reshape(-1, n1, 3),
    )


def _check_martingale(scenario: ScenarioPath):
    if not scenario.is_martingale:
        raise DomainError("finite-population analysis needs a martingale price")


def _mf_table(params, grid, table):
    if table is None:
        return KernelTable.build(params, grid)
    table.grid.check_same(grid)
    if table.params != params or table.minor_impact is not None:
        raise DomainError("kernel table was built for different parameters")
    return table


# ------------------------------------------------------------------- profile


def _check_variances(Xcheck, N):
    if N < 2:
        return
    sq = (np.diff(Xcheck[..., :N, :], axis=-1) ** 2).reshape(-1, N, Xcheck.shape[-1] - 1)
    qv = sq.sum(axis=(0, 2))
    if qv.min() <= 0:
        return
    # realised variances of Gaussian increments carry a relative error sqrt(2 / m)
    noise = 6.0 * math.sqrt(2.0 / (sq.shape[0] * sq.shape[2]))
    spread = qv.max() / qv.min() - 1.0
    if spread > VARIANCE_TOLERANCE + noise:
        warnings.warn(
            f"minor forecast variances differ by {spread:.0%}; the symmetric profile assumes a common variance",
            RuntimeWarning,
            stacklevel=3,
        )


def build_eps_nash_profile(
    scenario: ScenarioPath,
    params: MarketParams,
    N: int,
    table: Optional[KernelTable] = None,
    equilibrium: Optional[StackelbergEquilibrium] = None,
    q: int = GL_Q,
) -> StrategyProfile:
    """Mean field strategies played by a population of ``N`` minors.

    Agent ``i`` uses forecast ``Xcheck[i]``; the scenario must hold at least
    ``N`` idiosyncratic paths.
    """
    if N < 1:
        raise DomainError("N must be >= 1")
    if scenario.n_minor < N:
        raise DomainError(f"scenario holds {scenario.n_minor} minor forecasts, {N} needed")
    _check_martingale(scenario)
    table = _mf_table(params, scenario.grid, table)
    eq = solve(scenario, params, table) if equilibrium is None else equilibrium
    Xc = scenario.Xcheck[..., :N, :]
    _check_variances(Xc, N)
    psi = idiosyncratic_position(Xc, table, params.lam)
    phi = eq.phibar[..., None, :] + psi

    nodes = table.cell_nodes(q)
    A = impact_matrix(params)
    X, rate = _cell_states(eq.Xi, _forcing(eq, scenario.S), nodes, A)
    news = _idiosyncratic_news(Xc, table, params.lam)
    mean_psi = psi[..., :-1].mean(axis=-2)[..., None] + nodes.tau * news.mean(axis=-2)[..., None]
    cell = CellDetail(
        phi0=X[..., 0],
        phi0_rate=rate[..., 0],
        phibar=X[..., 2] + mean_psi,
        phibar_mf=X[..., 2],
        base_rate=rate[..., 2],
        news=news,
    )
    return StrategyProfile(scenario.grid, eq.phi0, phi, eq.phibar, cell, eq)


# ------------------------------------------------------------- minor deviation


def _minor_gain_values(scenario, params, eq, table, N, agent, q=GL_Q):
    """Per-scenario gain of the exact best response of minor ``agent``."""
    grid = scenario.grid
    n = grid.n_steps
    a, a0, lam = params.a, params.a0, params.lam
    lam_p = lam + a / N
    S, Xbar, _, Xc, Xi, Mv = _flatten(scenario, eq)
    Xc = Xc[:, :N]
    own = Xc[:, agent]
    others = Xc.sum(axis=1) - own

    nodes = table.cell_nodes(q)
    A = impact_matrix(params)
    c = Mv[:, :-1] + S[:, :-1, None] * E_VEC
    Xn, Xr = _cell_states(Xi, c, nodes, A)
    K1, K2 = _future_kernels(table, nodes, 1.0 / nodes.alpha)
    v = np.array([a0, 0.0, a * (N - 1) / N])

    DT = table.DeltaTilde[:n, -1]
    tc = np.diag(table.DeltaTilde, 1)
    psi_o = idiosyncratic_position(others, table, lam)[:, :-1]
    g_o = _idiosyncratic_news(others, table, lam)
    g_i = _idiosyncratic_news(own, table, lam)
    psi_i_T = idiosyncratic_position(own, table, lam)[:, -1]

    exp_int = np.einsum("kab,Bkb->Bka", K1, Xi[:, :-1]) - np.einsum("kab,Bkb->Bka", K2, c)
    expected = S[:, :-1] * DT + exp_int @ v + (a / N) * (DT * psi_o + 0.5 * DT**2 * g_o)
    env = S[:, :-1, None] + Xn @ v + (a / N) * (psi_o[..., None] + nodes.tau * g_o[..., None])
    cell_int = (
        S[:, :-1] * tc
        + ((nodes.w / nodes.alpha)[..., None] * Xn).sum(axis=-2) @ v
        + (a / N) * (psi_o * tc + 0.5 * tc**2 * g_o)
    )
    r_star = Xr[..., 2] + g_i[..., None] / nodes.alpha
    target = (lam / lam_p) * (Xbar + own)[:, 1:]

    best = np.zeros(S.shape[0])
    acc = np.zeros(S.shape[0])
    half_aw = 0.5 * nodes.alpha * nodes.w
    for k in range(n):
        Y = lam_p * (best - target[:, k] - expected[:, k]) / (1.0 + lam_p * DT[k])
        r_best = -(env[:, k] + Y[:, None]) / nodes.alpha[k]
        acc += ((r_star[:, k] - r_best) ** 2) @ half_aw[k]
        best = best - (cell_int[:, k] + Y * tc[k])
    star_T = Xi[:, -1, 2] + psi_i_T
    return acc + 0.5 * lam_p * (star_T - best) ** 2


def minor_deviation_gain(
    i: int,
    profile: StrategyProfile,
    scenario: ScenarioPath,
    params: MarketParams,
    table: Optional[KernelTable] = None,
    deviation=None,
) -> Estimate:
    """Gain of minor ``i`` from deviating unilaterally.

    Without ``deviation`` the exact best response is used (the profile must
    come from :func:`build_eps_nash_profile`).  A ``deviation`` path is
    compared with the profile by left-point objectives.
    """
    if deviation is not None:
        base = objective_minor(i, profile, scenario, params, use_cells=False)
        dev = objective_minor(i, profile.replace_minor(i, deviation), scenario, params, use_cells=False)
        return Estimate.of(dev.values - base.values)
    if profile.equilibrium is None:
        raise DomainError("best-response gains need a profile built from the mean field equilibrium")
    if not 0 <= i < profile.N:
        raise DomainError(f"minor index {i} outside 0..{profile.N - 1}")
    _check_martingale(scenario)
    table = _mf_table(params, scenario.grid, table)
    q = profile.cell.q if profile.cell is not None else GL_Q
    return Estimate.of(_minor_gain_values(scenario, params, profile.equilibrium, table, profile.N, i, q))


# ------------------------------------------------------------- major deviation


@dataclass(frozen=True)
class DeviationSpec:
    """A leader deviation.

    ``kind`` is ``"zero"``, ``"n_optimal"`` (leader optimum against the
    ``N``-player minor response), ``"bump"`` (position bump
    ``scale * sin^2`` on ``[center - width/2, center + width/2]``, traded at a
    constant rate per cell) or ``"tilt"`` (extra rate ``scale * X0``).
    """

    kind: str
    scale: float = 0.0
    center: float = 12.0
    width: float = 6.0

    def __post_init__(self):
        if self.kind not in ("zero", "n_optimal", "bump", "tilt"):
            raise DomainError(f"unknown deviation kind {self.kind!r}")
        if self.kind == "bump" and self.width <= 0:
            raise DomainError("bump width must be positive")

    @property
    def identifier(self) -> str:
        if self.kind in ("zero", "n_optimal"):
            return f"major-{self.kind}"
        if self.kind == "bump":
            return f"major-bump{self.scale:+g}@{self.center:g}w{self.width:g}"
        return f"major-tilt{self.scale:+g}"

    def bump(self, t):
        lo = self.center - 0.5 * self.width
        x = np.clip((np.asarray(t, dtype=float) - lo) / self.width, 0.0, 1.0)
        return self.scale * np.sin(np.pi * x) ** 2


DEFAULT_MAJOR_DEVIATIONS = (
    DeviationSpec("n_optimal"),
    DeviationSpec("bump", 10.0, 8.0, 8.0),
    DeviationSpec("bump", -10.0, 16.0, 8.0),
    DeviationSpec("tilt", 0.001),
    DeviationSpec("tilt", -0.001),
)


def _major_values_from_states(X, rate, S, phi0_T, X0_T, nodes, params, d_nodes=0.0, rho=0.0, phibar=None):
    phi0 = X[..., 0] + d_nodes
    r0 = rate[..., 0] + rho
    agg = X[..., 2] if phibar is None else phibar
    price = S[:, :-1, None] + params.a * agg + params.a0 * phi0
    running = ((0.5 * nodes.alpha0 * r0**2 + r0 * price) * nodes.w).sum(axis=(-1, -2))
    return -(running + 0.5 * params.lam0 * (phi0_T - X0_T) ** 2)


def _deviation_paths(spec: DeviationSpec, grid: TimeGrid, X0: np.ndarray):
    """Deviation position ``d`` on the grid and its per-cell rate ``rho``."""
    B = X0.shape[0]
    if spec.kind == "bump":
        d = np.broadcast_to(spec.bump(grid.times), (B, grid.n_points)).copy()
        rho = np.diff(d, axis=-1) / grid.dt
    elif spec.kind == "tilt":
        rho = spec.scale * X0[:, 1:]
        d = np.concatenate([np.zeros((B, 1)), np.cumsum(rho * grid.dt, axis=-1)], axis=-1)
    else:
        d = np.zeros((B, grid.n_points))
        rho = np.zeros((B, grid.n_steps))
    return d, rho


def _respond(scenario, params, eq, table, N, spec, q=GL_Q):
    """Leader objective after ``spec`` with minors following the ``N``-player aggregate response.

    Returns ``(J, phibar)`` with ``phibar`` the projected aggregate on the grid.
    ``N=None`` uses the mean field response.
    """
    grid = scenario.grid
    n, t = grid.n_steps, grid.times
    a, a0, lam = params.a, params.a0, params.lam
    aN = a if N is None else a * (N - 1) / N
    lam_p = lam if N is None else lam + a / N
    S, Xbar, X0, _, Xi, Mv = _flatten(scenario, eq)
    B = S.shape[0]
    nodes = table.cell_nodes(q)
    A = impact_matrix(params)
    c = Mv[:, :-1] + S[:, :-1, None] * E_VEC
    Xn, Xr = _cell_states(Xi, c, nodes, A)

    # weights eta_N(s, T) / alpha(s) for conditional expectations of phibar_T
    DT = table.DeltaTilde[:n, -1]
    omega = np.exp(-aN * (DT[:, None] - nodes.tau)) / nodes.alpha
    K1, K2 = _future_kernels(table, nodes, omega)
    ow = nodes.w * omega
    Omega = np.cumsum(ow.sum(axis=1)[::-1])[::-1]
    Theta = np.cumsum((ow * nodes.u).sum(axis=1)[::-1])[::-1] - t[:-1] * Omega
    eta_T = np.exp(-aN * DT)

    d, rho = _deviation_paths(spec, grid, X0)
    u_rel = nodes.u - t[:-1, None]
    d_nodes = d[:, :-1, None] + rho[..., None] * u_rel
    if spec.kind == "bump":
        L = np.cumsum((ow * d_nodes[0]).sum(axis=1)[::-1])[::-1][None, :]
    else:
        L = d[:, :-1] * Omega + rho * Theta
    G = (np.einsum("kab,Bkb->Bka", K1, Xi[:, :-1]) - np.einsum("kab,Bkb->Bka", K2, c))[..., 0] + L

    A5 = np.zeros((5, 5))
    A5[:3, :3] = A
    A5[4] = [a0, 0.0, 0.0, a0, aN]

    def binv5(s):
        inv_a = 1.0 / params.alpha(s)
        return np.stack([1.0 / params.alpha0(s), inv_a, inv_a, np.ones_like(s), inv_a], axis=-1)

    Tr5, Pi5, Tr5_end, Pi5_end = _propagators(A5, binv5, grid, u_rel[0])

    phibar = np.zeros((B, n + 1))
    acc = np.zeros(B)
    for k in range(n):
        z = np.concatenate([Xi[:, k], d[:, k, None], phibar[:, k, None]], axis=-1)
        Y = (lam_p * (eta_T[k] * phibar[:, k] - Omega[k] * S[:, k] - a0 * G[:, k]) - lam * Xbar[:, k + 1]) / (
            1.0 + lam_p * Omega[k]
        )
        c5 = np.concatenate([c[:, k], -rho[:, k, None], (S[:, k] + Y)[:, None]], axis=-1)
        zq = np.einsum("qab,Bb->Bqa", Tr5[k], z) - np.einsum("qab,Bb->Bqa", Pi5[k], c5)
        zq[..., :3] = Xn[:, k]  # exact leader nodes
        zq[..., 3] = d_nodes[:, k]
        phi0 = zq[..., 0] + zq[..., 3]
        r0 = Xr[:, k, :, 0] + rho[:, k, None]
        price = S[:, k, None] + a * zq[..., 4] + a0 * phi0
        acc += (0.5 * nodes.alpha0[k] * r0**2 + r0 * price) @ nodes.w[k]
        phibar[:, k + 1] = (Tr5_end[k] @ z.T).T[:, 4] - (Pi5_end[k] @ c5.T).T[:, 4]
    J = -(acc + 0.5 * params.lam0 * (Xi[:, -1, 0] + d[:, -1] - X0[:, -1]) ** 2)
    return J, phibar


def _major_gain_values(scenario, params, eq, table, N, spec, q=GL_Q, n_table=None):
    S, _, X0, _, Xi, Mv = _flatten(scenario, eq)
    if spec.kind == "zero":
        return np.zeros(S.shape[0])
    nodes = table.cell_nodes(q)
    A = impact_matrix(params)
    Xn, Xr = _cell_states(Xi, Mv[:, :-1] + S[:, :-1, None] * E_VEC, nodes, A)
    base = _major_values_from_states(Xn, Xr, S, Xi[:, -1, 0], X0[:, -1], nodes, params)
    if spec.kind == "n_optimal":
        aN = params.a * (N - 1) / N
        if n_table is None:
            n_table = KernelTable.build(params, scenario.grid, minor_impact=aN)
        eqN = solve(scenario, params, n_table, minor_impact=aN, minor_penalty=params.lam + params.a / N)
        XiN = eqN.Xi.reshape(Xi.shape)
        cN = eqN.Mvec.reshape(Xi.shape)[:, :-1] + S[:, :-1, None] * E_VEC
        nodesN = n_table.cell_nodes(q)
        XnN, XrN = _cell_states(XiN, cN, nodesN, impact_matrix(params, aN))
        dev = _major_values_from_states(XnN, XrN, S, XiN[:, -1, 0], X0[:, -1], nodesN, params)
    else:
        dev, _ = _respond(scenario, params, eq, table, N, spec, q)
    return dev - base


def major_deviation_gain(
    profile: StrategyProfile,
    scenario: ScenarioPath,
    params: MarketParams,
    deviation: DeviationSpec,
    table: Optional[KernelTable] = None,
) -> Estimate:
    """Leader gain from ``deviation`` with the minors re-responding.

    The zero deviation leaves the profile untouched, so its gain is exactly 0.
    """
    if profile.equilibrium is None:
        raise DomainError("major gains need a profile built from the mean field equilibrium")
    _check_martingale(scenario)
    table = _mf_table(params, scenario.grid, table)
    return Estimate.of(_major_gain_values(scenario, params, profile.equilibrium, table, profile.N, deviation))


def aggregate_response(
    scenario: ScenarioPath,
    params: MarketParams,
    deviation: DeviationSpec = DeviationSpec("zero"),
    N: Optional[int] = None,
    table: Optional[KernelTable] = None,
    equilibrium: Optional[StackelbergEquilibrium] = None,
):
    """Minor aggregate (projected on common information) answering a bump or tilt.

    Returns ``(J0, phibar)``: the leader objective per scenario and the
    aggregate path.  ``N=None`` is the mean field response.
    """
    if deviation.kind == "n_optimal":
        raise DomainError("use stackelberg.solve with modified minor parameters for the N-optimal leader")
    _check_martingale(scenario)
    table = _mf_table(params, scenario.grid, table)
    eq = solve(scenario, params, table) if equilibrium is None else equilibrium
    J, phibar = _respond(scenario, params, eq, table, N, deviation)
    shape = scenario.batch_shape
    return J.reshape(shape), phibar.reshape(shape + (scenario.grid.n_points,))


# -------------------------------------------------------------------- study


@dataclass(frozen=True)
class GainRow:
    N: int
    deviation_id: str
    gain: float
    se: float


@dataclass
class EpsNashReport:
    """Deviation gains over population sizes with the fitted ``C / sqrt(N)`` envelope."""

    rows: list
    n_sim: int
    runtime: float = 0.0

    @property
    def C(self) -> float:
        """Smallest ``C`` with ``gain - 3 se <= C / sqrt(N)`` on every row."""
        return max((max(r.gain - 3 * r.se, 0.0) * math.sqrt(r.N) for r in self.rows), default=0.0)

    def bound(self, N: int) -> float:
        return self.C / math.sqrt(N)

    def slope(self, deviation_id: str) -> float:
        """Log-log slope of ``|gain|`` against ``N``.

        Leader gains are negative (re-responding minors make every tested
        deviation unprofitable), so the fit uses magnitudes; nan unless all
        gains are nonzero and share a sign.
        """
        rows = [r for r in self.rows if r.deviation_id == deviation_id]
        gains = np.array([r.gain for r in rows])
        if len(rows) < 2 or not (np.all(gains > 0) or np.all(gains < 0)):
            return float("nan")
        x = np.log([r.N for r in rows])
        return float(np.polyfit(x, np.log(np.abs(gains)), 1)[0])

    @property
    def slopes(self) -> dict:
        present = {r.deviation_id for r in self.rows}
        return {d: self.slope(d) for d in ("minor-best-response", "major-n_optimal") if d in present}

    @property
    def passed(self) -> bool:
        ok_slopes = all(s <= SLOPE_LIMIT for s in self.slopes.values())
        ok_bound = all(r.gain <= self.bound(r.N) + 3 * r.se + 1e-12 for r in self.rows)
        return ok_slopes and ok_bound

    def to_csv(self, target=None) -> str:
        """Write ``N,deviation_id,gain,se,bound`` with round-trip floats."""
        lines = ["N,deviation_id,gain,se,bound"]
        for r in self.rows:
            lines.append(f"{r.N},{r.deviation_id},{float(r.gain)!r},{float(r.se)!r},{self.bound(r.N)!r}")
        text = "\n".join(lines) + "\n"
        if target is not None:
            if hasattr(target, "write"):
                target.write(text)
            else:
                with open(target, "w", newline="") as fh:
                    fh.write(text)
        return text


def epsilon_nash_study(
    params: MarketParams,
    grid: TimeGrid,
    Ns: Sequence[int] = (4, 16, 64, 256),
    n_sim: int = 10_000,
    base_seed: int = 0,
    deviations: Iterable[DeviationSpec] = DEFAULT_MAJOR_DEVIATIONS,
    agent: int = 0,
    chunk: int = 500,
) -> EpsNashReport:
    """Minor and major deviation gains for every ``N`` on a common ensemble.

    Scenarios are generated in chunks so that large populations fit in
    memory; the first ``N`` idiosyncratic paths of a scenario do not depend
    on how many are drawn.
    """
    import time

    start = time.perf_counter()
    deviations = list(deviations)
    table = _mf_table(params, grid, None)
    rows = []
    for N in Ns:
        if not 0 <= agent < N:
            raise DomainError(f"agent {agent} does not exist for N = {N}")
        n_table = None
        if any(d.kind == "n_optimal" for d in deviations):
            n_table = KernelTable.build(params, grid, minor_impact=params.a * (N - 1) / N)
        minor_vals = []
        major_vals = {d.identifier: [] for d in deviations}
        for lo in range(0, n_sim, chunk):
            size = min(chunk, n_sim - lo)
            scen = ensemble_batch(params, grid, N, size, base_seed, start=lo)
            eq = solve(scen, params, table)
            minor_vals.append(_minor_gain_values(scen, params, eq, table, N, agent))
            for d in deviations:
                major_vals[d.identifier].append(_major_gain_values(scen, params, eq, table, N, d, n_table=n_table))
        est = Estimate.of(np.concatenate(minor_vals))
        rows.append(GainRow(N, "minor-best-response", est.mean, est.se))
        for d in deviations:
            est = Estimate.of(np.concatenate(major_vals[d.identifier]))
            rows.append(GainRow(N, d.identifier, est.mean, est.se))
    return EpsNashReport(rows, n_sim, time.perf_counter() - start)
