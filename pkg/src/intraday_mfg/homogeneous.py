"""Mean field equilibrium with identical agents and no major player.

Discretization: every input is held constant on each grid cell
``[t_k, t_{k+1})`` and the deterministic kernels are integrated exactly inside
the cell.  The price takes its value at ``t_k``; a forecast takes its value at
``t_{k+1}``, i.e. the forecast revision over a cell is announced at the start
of the cell.  Both are piecewise-constant martingales for the information flow
``(S_0..S_k, X_0..X_{k+1})``, so the formulas are exact for this input, and
forecast integrals become the left-point (Ito) sums
``int Delta_{s,t} dX_s -> sum_k Delta_{t_k,t} (X_{k+1} - X_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError
from .grid import TimeGrid
from .kernels import KernelTable, MarketParams
from .scenarios import ScenarioPath, write_columns

__all__ = [
    "HomogeneousEquilibrium",
    "i_process",
    "equilibrium",
    "idiosyncratic_position",
    "increments",
    "forecast_increments",
]


def increments(x: np.ndarray) -> np.ndarray:
    """``(x_0, x_1 - x_0, ..., x_n - x_{n-1})`` along the last axis: the news
    announced at each grid time for a process observed at its left point."""
    out = np.empty_like(x)
    out[..., 0] = x[..., 0]
    out[..., 1:] = np.diff(x, axis=-1)
    return out


def forecast_increments(x: np.ndarray) -> np.ndarray:
    """News announced at each grid time for a forecast: ``x_1`` at ``t_0``
    (initial value plus first revision), ``x_{k+1} - x_k`` at ``t_k`` and
    nothing at ``T``."""
    out = np.zeros_like(x)
    out[..., 0] = x[..., 1]
    out[..., 1:-1] = np.diff(x[..., 1:], axis=-1)
    return out


def _table(params, grid, table):
    if table is None:
        return KernelTable.build(params.with_weights(0.0, params.a), grid)
    table.grid.check_same(grid)
    return table


def _cell_weights(table: KernelTable):
    """``w[j, k] = eta(t_{j+1}, t_k) Delta_{t_j, t_{j+1}}`` for ``j < k``, else 0."""
    n = table.n
    cell = np.diagonal(table.Delta, offset=1)  # Delta_{t_j, t_{j+1}}
    w = table.eta[1:, :] * cell[:, None]
    return np.where(np.arange(n)[:, None] < np.arange(n + 1)[None, :], w, 0.0)


def i_process(scenario: ScenarioPath, params: MarketParams, table: Optional[KernelTable] = None):
    """Return ``(I, I_tilde)`` on the grid.

    ``I_t = int_0^t eta(s,t) S_s / alpha(s) ds`` and ``I_tilde`` is the
    conditional expectation of ``I_T``; future prices are replaced by their
    conditional means (the current price, plus the drift if one is given).
    """
    table = _table(params, scenario.grid, table)
    w = _cell_weights(table)
    S = scenario.S
    I = S[..., :-1] @ w
    wT = w[:, -1]
    partial = np.concatenate([np.zeros(S.shape[:-1] + (1,)), np.cumsum(S[..., :-1] * wT, axis=-1)], axis=-1)
    I_tilde = partial + S * table.Delta[:, -1]
    if scenario.S_drift is not None:
        m = scenario.S_drift
        # sum_{j >= k} (m_j - m_k) wT_j
        tail = np.concatenate([np.cumsum((m[:-1] * wT)[::-1])[::-1], [0.0]])
        I_tilde = I_tilde + tail - m * table.Delta[:, -1]
    return I, I_tilde


def idiosyncratic_position(Xcheck, table: KernelTable, penalty: float, weight: Optional[float] = None):
    """Position driven by private forecasts: ``sum_k DeltaTilde_{t_k,t} w dX_k / (1 + p DeltaTilde_{t_k,T})``.

    ``penalty`` is the terminal penalty ``p`` of the tracking problem and
    ``weight`` (default ``penalty``) multiplies the forecast increments.
    Works on any array with time on the last axis.
    """
    weight = penalty if weight is None else weight
    dtil = table.DeltaTilde
    W = dtil / (1.0 + penalty * dtil[:, -1])[:, None]
    return weight * (forecast_increments(np.asarray(Xcheck, dtype=float)) @ W)


@dataclass(frozen=True)
class HomogeneousEquilibrium:
    grid: TimeGrid
    phi_star: np.ndarray
    phi_bar: np.ndarray
    price: np.ndarray
    I: np.ndarray
    I_tilde: np.ndarray
    Ybar: np.ndarray

    def to_csv(self, target=None) -> str:
        """Write ``t,phi_star,phi_bar,price,I,I_tilde`` for a single scenario."""
        if self.phi_bar.ndim != 1:
            raise DomainError("CSV export needs a single scenario")
        header = ["t", "phi_star", "phi_bar", "price", "I", "I_tilde"]
        cols = [self.grid.times, self.phi_star, self.phi_bar, self.price, self.I, self.I_tilde]
        return write_columns(header, cols, target)


def equilibrium(
    scenario: ScenarioPath,
    params: MarketParams,
    agent_index: Optional[int] = 0,
    table: Optional[KernelTable] = None,
) -> HomogeneousEquilibrium:
    """Closed-form equilibrium of the identical-agents game.

    ``agent_index`` (0-based) picks the private forecast of the reported
    generic agent; None (or a scenario without minor paths) reports the
    aggregate.  Any major impact weight in ``params`` is ignored.
    """
    table = _table(params, scenario.grid, table)
    lam = params.lam
    I, I_tilde = i_process(scenario, params, table)
    dY = increments(I_tilde) + forecast_increments(scenario.Xbar)
    W = table.Delta / (1.0 + lam * table.Delta[:, -1])[:, None]
    phi_bar = -I + lam * (dY @ W)
    # common adjoint: dYbar_k = -lam dY_k / (1 + lam Delta_{t_k,T})
    Ybar = np.cumsum(-lam * dY / (1.0 + lam * table.Delta[:, -1]), axis=-1)
    if agent_index is None or scenario.n_minor == 0:
        phi_star = phi_bar.copy()
    else:
        if not 0 <= agent_index < scenario.n_minor:
            raise DomainError(f"agent_index {agent_index} outside 0..{scenario.n_minor - 1}")
        phi_star = phi_bar + idiosyncratic_position(scenario.Xcheck[..., agent_index, :], table, lam)
    price = scenario.S + params.a * phi_bar
    return HomogeneousEquilibrium(scenario.grid, phi_star, phi_bar, price, I, I_tilde, Ybar)
