"""Closed-form Stackelberg equilibrium between a major agent and the mean field.

The state is ``Xi = (phi0, N, phibar)`` and the martingale vector
``M = (M0, M, Ybar)``.  Same cell discretization as :mod:`homogeneous`:
inputs are frozen on ``[t_k, t_{k+1})`` (price at ``t_k``, forecasts at
``t_{k+1}``), the linear dynamics are propagated exactly in each cell through
:class:`~intraday_mfg.kernels.KernelTable` and martingale increments are taken
when the news is announced.  ``Mvec[k]`` is the adjoint on cell ``k``.  With
this choice the terminal identities and the recursion ``Xi_{k+1} = Trans_k
Xi_k - Pi_k (M_k + e S_k)`` hold to rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._precision import EXT, dd_from_ext, dd_matmul, dd_to_ext, exact_inverse
from .errors import DomainError
from .grid import TimeGrid
from .homogeneous import forecast_increments, idiosyncratic_position, increments
from .kernels import KernelTable, MarketParams, inv3, terminal_matrices
from .scenarios import ScenarioPath, write_columns

__all__ = [
    "StackelbergEquilibrium",
    "upsilon",
    "solve",
    "solve_martingale_form",
    "limit_infinite_penalty",
    "limit_no_penalty",
    "minor_strategy",
    "D_INFINITY",
]

E_VEC = np.array([1.0, 0.0, 1.0])
D_INFINITY = np.diag([1.0, 0.0, 1.0])
# Below this intercept the trading cost effectively vanishes and the
# equilibrium is no longer unique; such inputs are refused.
MIN_LIQUIDITY = 1e-8


@dataclass(frozen=True)
class StackelbergEquilibrium:
    """Equilibrium paths; ``Xi`` and ``Mvec`` have shape ``(..., n + 1, 3)``."""

    grid: TimeGrid
    Xi: np.ndarray
    price: np.ndarray
    Mvec: np.ndarray
    Upsilon: np.ndarray
    Upsilon_tilde: np.ndarray
    phi_i: Optional[np.ndarray] = None

    @property
    def phi0(self):
        return self.Xi[..., 0]

    @property
    def N(self):
        return self.Xi[..., 1]

    @property
    def phibar(self):
        return self.Xi[..., 2]

    @property
    def M0(self):
        return self.Mvec[..., 0]

    @property
    def M(self):
        return self.Mvec[..., 1]

    @property
    def Ybar(self):
        return self.Mvec[..., 2]

    def to_csv(self, target=None) -> str:
        """Write ``t,phi0,N,phibar,price,M0,M,Ybar`` plus ``phi_i`` columns."""
        if self.Xi.ndim != 2:
            raise DomainError("CSV export needs a single scenario")
        header = ["t", "phi0", "N", "phibar", "price", "M0", "M", "Ybar"]
        cols = [self.grid.times, self.phi0, self.N, self.phibar, self.price, self.M0, self.M, self.Ybar]
        if self.phi_i is not None:
            extra = np.atleast_2d(self.phi_i)
            header += [f"phi_{i + 1}" for i in range(len(extra))]
            cols += list(extra)
        return write_columns(header, cols, target)


def _check_liquidity(params: MarketParams):
    if params.liquidity.min_alpha() < MIN_LIQUIDITY:
        raise DomainError(
            "trading costs vanish (liquidity intercept ~ 0): the equilibrium is not unique there"
        )


def _table(params, grid, table, minor_impact=None):
    _check_liquidity(params)
    if table is None:
        return KernelTable.build(params, grid, minor_impact=minor_impact)
    table.grid.check_same(grid)
    if table.params != params or table.minor_impact != minor_impact:
        raise DomainError("kernel table was built for different parameters")
    return table


def upsilon(scenario: ScenarioPath, params: MarketParams, table: Optional[KernelTable] = None):
    """Return ``(Upsilon, Upsilon_tilde)``, each of shape ``(..., n + 1, 3)``.

    ``Upsilon_t`` is the response of the homogeneous dynamics to the price
    alone and ``Upsilon_tilde_t`` the conditional expectation of ``Upsilon_T``.
    """
    table = _table(params, scenario.grid, table)
    ups, ups_t = _upsilon_ext(scenario, table)
    return ups.astype(float), ups_t.astype(float)


def _upsilon_ext(scenario: ScenarioPath, table: KernelTable):
    # Summation by parts over the frozen cells:
    #   Upsilon_k       = -sum_{j<=k} Pi[j, k] e dS_j
    #   Upsilon_tilde_k = -sum_{j<=k} Pi[j, T] e dS_j - sum_{j>k} Pi[j, T] e dm_j
    # with dS_0 = S_0 and m the deterministic drift (if any).  This avoids
    # differencing sums of size |Phi(T)| S.
    dS = increments(scenario.S.astype(EXT))
    pe = table.Pi_ext @ E_VEC  # (n + 1, n + 1, 3)
    ups = -np.einsum("jka,...j->...ka", pe, dS)
    to_T = pe[:, -1]
    ups_t = -np.cumsum(dS[..., None] * to_T, axis=-2)
    if scenario.S_drift is not None:
        dm = increments(scenario.S_drift.astype(EXT))
        later = np.cumsum((dm[:, None] * to_T)[::-1], axis=0)[::-1]
        ups_t = ups_t - np.concatenate([later[1:], np.zeros((1, 3), dtype=EXT)])
    return ups, ups_t


def _forecast_vector(scenario: ScenarioPath):
    X0 = scenario.X0.astype(EXT)
    return np.stack([X0, np.zeros_like(X0), scenario.Xbar.astype(EXT)], axis=-1)


@dataclass(frozen=True)
class _Weights:
    """Per-parameter weights: ``G_j``, ``W[j, k] = Pi[j, k] G_j`` and ``Q[j, k] = W[j, k] R``."""

    G: np.ndarray
    W: np.ndarray
    Q: Optional[np.ndarray]


def _weights(table: KernelTable, D: Optional[np.ndarray], kind: str = "gain") -> _Weights:
    """Weights for ``G_j = (I + D Pi_{t_j,T})^{-1}`` (``kind="gain"``, ``Q = W D``)
    or ``G_j = Pi_{t_j,T}^{-1}`` for ``j < n`` (``kind="tracking"``, no ``Q``)."""
    key = (kind, None if D is None else D.tobytes())
    if key in table.cache:
        return table.cache[key]
    n = table.n
    pi_T = table.Pi_ext[:, -1]
    if kind == "gain":
        m = np.eye(3, dtype=EXT) + D.astype(EXT) @ pi_T
        inv3(m.astype(float), time=table.grid.times)
        g = exact_inverse(m)
    else:
        inv3(pi_T[:n].astype(float), time=table.grid.times[:n])
        g_hi, g_lo = exact_inverse(pi_T[:n])
        g = (np.concatenate([g_hi, np.zeros((1, 3, 3))]), np.concatenate([g_lo, np.zeros((1, 3, 3))]))
    pi = dd_from_ext(table.Pi_ext)
    w = dd_matmul(pi, (g[0][:, None], g[1][:, None]))
    q = None
    if kind == "gain":
        q = dd_to_ext(dd_matmul(w, (D, np.zeros_like(D))))
    out = _Weights(G=dd_to_ext(g), W=dd_to_ext(w), Q=q)
    table.cache[key] = out
    return out


def _apply(weights: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """``sum_j weights[j, k] dx_j`` for every k."""
    return np.einsum("jkab,...jb->...ka", weights, dx)


def _assemble(scenario, params, ups, ups_t, Xi, Mvec):
    Xi = Xi.astype(float)
    price = scenario.S + params.a * Xi[..., 2] + params.a0 * Xi[..., 0]
    return StackelbergEquilibrium(
        scenario.grid, Xi, price, Mvec.astype(float), ups.astype(float), ups_t.astype(float)
    )


def _martingale_increments(wts, D, Lam, ups_t, X):
    rhs = increments_vec(ups_t) @ D.T.astype(EXT) - forecast_increments_vec(X) @ Lam.T.astype(EXT)
    return np.einsum("kab,...kb->...ka", wts.G, rhs)


def increments_vec(x: np.ndarray) -> np.ndarray:
    """Increments along the time axis of ``(..., n + 1, 3)`` arrays."""
    return np.swapaxes(increments(np.swapaxes(x, -1, -2)), -1, -2)


def forecast_increments_vec(x: np.ndarray) -> np.ndarray:
    """Announced forecast revisions of ``(..., n + 1, 3)`` arrays."""
    return np.swapaxes(forecast_increments(np.swapaxes(x, -1, -2)), -1, -2)


def solve(
    scenario: ScenarioPath,
    params: MarketParams,
    table: Optional[KernelTable] = None,
    *,
    minor_impact: Optional[float] = None,
    minor_penalty: Optional[float] = None,
) -> StackelbergEquilibrium:
    """Evaluate the closed-form equilibrium and reconstruct ``(M0, M, Ybar)``.

    ``minor_impact`` and ``minor_penalty`` override the impact weight and
    terminal penalty perceived by the minor agents (the defaults give the
    mean field game); the target stays ``lam * Xbar``.
    """
    table = _table(params, scenario.grid, table, minor_impact)
    D, Lam = terminal_matrices(params, minor_impact, minor_penalty)
    wts = _weights(table, D)
    ups, ups_t = _upsilon_ext(scenario, table)
    X = _forecast_vector(scenario)
    # Xi_k = Upsilon_k - sum_j Pi[j,k] G_j (D dUpsilon_tilde_j - Lambda dX_j)
    Xi = ups - _apply(wts.Q, increments_vec(ups_t)) + _apply(wts.W, forecast_increments_vec(X) @ Lam.T.astype(EXT))
    dM = _martingale_increments(wts, D, Lam, ups_t, X)
    return _assemble(scenario, params, ups, ups_t, Xi, np.cumsum(dM, axis=-2))


def solve_martingale_form(
    scenario: ScenarioPath, params: MarketParams, table: Optional[KernelTable] = None
) -> StackelbergEquilibrium:
    """Same equilibrium written directly in terms of ``S - lam X`` (martingale price only)."""
    if not scenario.is_martingale:
        raise DomainError("the martingale form needs a martingale price (no drift)")
    table = _table(params, scenario.grid, table)
    D, Lam = terminal_matrices(params)
    wts = _weights(table, D)
    X = _forecast_vector(scenario)
    dv = increments(scenario.S.astype(EXT))[..., None] * E_VEC - forecast_increments_vec(X) @ Lam.T.astype(EXT)
    Xi = -_apply(wts.W, dv)
    ups, ups_t = _upsilon_ext(scenario, table)
    dM = _martingale_increments(wts, D, Lam, ups_t, X)
    return _assemble(scenario, params, ups, ups_t, Xi, np.cumsum(dM, axis=-2))


def limit_infinite_penalty(
    scenario: ScenarioPath,
    params: MarketParams,
    table: Optional[KernelTable] = None,
    martingale_form: bool = False,
) -> StackelbergEquilibrium:
    """Limit of the equilibrium as both terminal penalties tend to infinity.

    Weights ``Pi_{s,t} Pi_{s,T}^{-1}`` are used on ``[0, T)``; at ``T`` the
    positions are set to the forecasts (exact tracking) and ``N`` keeps its
    left limit.  ``martingale_form`` uses the price-free representation valid
    for a martingale price.  ``Mvec`` is not defined in the limit and is NaN.
    """
    table = _table(params, scenario.grid, table)
    n = table.n
    X = _forecast_vector(scenario)
    wts = _weights(table, None, kind="tracking")
    d_inf = D_INFINITY.astype(EXT)
    if martingale_form:
        if not scenario.is_martingale:
            raise DomainError("the martingale form needs a martingale price (no drift)")
        ups, ups_t = _upsilon_ext(scenario, table)
        driver = -(forecast_increments_vec(X) @ d_inf.T)
        base = np.zeros_like(ups)
    else:
        ups, ups_t = _upsilon_ext(scenario, table)
        driver = increments_vec(ups_t) - forecast_increments_vec(X) @ d_inf.T
        base = ups
    Xi = base - _apply(wts.W[:n], driver[..., :n, :])
    # row n already holds the left limit (arrivals before T only)
    Xi[..., n, 0] = scenario.X0[..., n]
    Xi[..., n, 2] = scenario.Xbar[..., n]
    Mvec = np.full_like(Xi, np.nan)
    return _assemble(scenario, params, ups, ups_t, Xi, Mvec)


def limit_no_penalty(
    scenario: ScenarioPath, params: MarketParams, table: Optional[KernelTable] = None
) -> StackelbergEquilibrium:
    """Equilibrium without terminal penalties: forecasts drop out, prices still look ahead."""
    table = _table(params, scenario.grid, table)
    D0, _ = terminal_matrices(params.replace(lam=0.0, lam0=0.0))
    ups, ups_t = _upsilon_ext(scenario, table)
    wts = _weights(table, D0)
    dU = increments_vec(ups_t)
    Xi = ups - _apply(wts.Q, dU)
    dM = np.einsum("kab,...kb->...ka", wts.G, dU @ D0.T.astype(EXT))
    return _assemble(scenario, params, ups, ups_t, Xi, np.cumsum(dM, axis=-2))


def minor_strategy(
    scenario: ScenarioPath,
    params: MarketParams,
    equilibrium: StackelbergEquilibrium,
    agent_index: int,
    table: Optional[KernelTable] = None,
) -> np.ndarray:
    """Position of minor agent ``agent_index`` (0-based): aggregate plus private tracking."""
    if not 0 <= agent_index < scenario.n_minor:
        raise DomainError(f"agent_index {agent_index} outside 0..{scenario.n_minor - 1}")
    table = _table(params, scenario.grid, table)
    own = idiosyncratic_position(scenario.Xcheck[..., agent_index, :], table, params.lam)
    return equilibrium.phibar + own
