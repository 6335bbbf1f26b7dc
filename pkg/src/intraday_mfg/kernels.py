"""Liquidity schedules, market constants and the deterministic kernels.

Everything in this module is a pure function of :class:`MarketParams` (and a
:class:`~intraday_mfg.grid.TimeGrid` for :class:`KernelTable`).  For the affine
liquidity schedule ``alpha(t) = slope * (T - t) + intercept`` the scalar kernels
have closed forms; any other schedule goes through composite Gauss-Legendre
quadrature (32 nodes per panel, panel width at most ``T / 96``).

The 3x3 fundamental matrix ``Phi`` solves ``Phi' = -B(t)^{-1} A Phi`` with
``Phi(0) = I``.  When ``alpha0 = c * alpha`` the generator is a scalar function
of time times a constant matrix and ``Phi`` is a matrix exponential in the
"liquidity clock" ``int_0^t du / alpha(u)``; otherwise a fixed-step RK4 is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from .errors import DomainError, SingularMatrixError
from .grid import TimeGrid

GL_NODES = 32
_GL_X, _GL_W = np.polynomial.legendre.leggauss(GL_NODES)
PANELS_PER_HORIZON = 96
PROPORTIONALITY_RTOL = 1e-12
# RK4 substep: at most this fraction of the fastest local rate alpha / |A|.
RK4_RATE_FRACTION = 0.005


# ---------------------------------------------------------------------------
# liquidity and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LiquiditySchedule:
    """Affine trading-cost coefficients, decreasing towards delivery.

    ``alpha(t) = alpha_slope * (T - t) + alpha_intercept`` and likewise for the
    major agent's ``alpha0``.
    """

    alpha_slope: float = 0.3
    alpha_intercept: float = 0.1
    alpha0_slope: float = 0.3
    alpha0_intercept: float = 0.1
    T: float = 24.0

    is_affine = True

    def __post_init__(self):
        if not self.T > 0:
            raise DomainError(f"horizon T must be positive, got {self.T}")
        for name, slope, icpt in (
            ("alpha", self.alpha_slope, self.alpha_intercept),
            ("alpha0", self.alpha0_slope, self.alpha0_intercept),
        ):
            if not (icpt > 0 and slope * self.T + icpt > 0):
                raise DomainError(
                    f"{name}(t) must be strictly positive on [0, T] "
                    f"(slope={slope}, intercept={icpt})"
                )

    def alpha(self, t):
        return self.alpha_slope * (self.T - np.asarray(t, dtype=float)) + self.alpha_intercept

    def alpha0(self, t):
        return self.alpha0_slope * (self.T - np.asarray(t, dtype=float)) + self.alpha0_intercept

    def min_alpha(self) -> float:
        return min(
            self.alpha_intercept,
            self.alpha_slope * self.T + self.alpha_intercept,
            self.alpha0_intercept,
            self.alpha0_slope * self.T + self.alpha0_intercept,
        )

    def proportionality(self) -> Optional[float]:
        """Return ``c`` when ``alpha0 = c * alpha`` identically, else None."""
        c = self.alpha0_intercept / self.alpha_intercept
        scale = max(abs(self.alpha0_slope), abs(c * self.alpha_slope))
        if abs(self.alpha0_slope - c * self.alpha_slope) <= PROPORTIONALITY_RTOL * scale:
            return c
        return None


@dataclass(frozen=True)
class CallableLiquidity:
    """Arbitrary positive liquidity functions (generic quadrature / ODE path)."""

    alpha_fn: Callable[[np.ndarray], np.ndarray]
    alpha0_fn: Callable[[np.ndarray], np.ndarray]
    T: float = 24.0

    is_affine = False

    def __post_init__(self):
        probe = np.linspace(0.0, self.T, 1001)
        if np.any(self.alpha(probe) <= 0) or np.any(self.alpha0(probe) <= 0):
            raise DomainError("liquidity functions must be strictly positive on [0, T]")

    def alpha(self, t):
        return np.asarray(self.alpha_fn(np.asarray(t, dtype=float)), dtype=float)

    def alpha0(self, t):
        return np.asarray(self.alpha0_fn(np.asarray(t, dtype=float)), dtype=float)

    def min_alpha(self) -> float:
        probe = np.linspace(0.0, self.T, 1001)
        return float(min(self.alpha(probe).min(), self.alpha0(probe).min()))

    def proportionality(self) -> Optional[float]:
        return None


@dataclass(frozen=True)
class MarketParams:
    """Scalar model constants; the defaults are the reference parameter table.

    The table lists a single impact weight ``a = 1`` (no major impact); the
    Stackelberg experiments use :meth:`with_weights`, e.g. ``(0.5, 0.5)``.
    """

    a: float = 1.0
    a0: float = 0.0
    lam: float = 100.0
    lam0: float = 100.0
    liquidity: LiquiditySchedule = field(default_factory=LiquiditySchedule)
    S0: float = 40.0
    sigma_S: float = 10.0
    Xbar0: float = 0.0
    sigma_bar: float = 73.0
    sigma_0: float = 73.0
    sigma_X: float = 73.0
    X0_0: float = 0.0
    Xcheck0: float = 0.0

    def __post_init__(self):
        for name in ("a", "a0", "lam", "lam0", "sigma_S", "sigma_bar", "sigma_0", "sigma_X"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise DomainError(f"{name} must be finite and >= 0, got {value}")

    @property
    def T(self) -> float:
        return self.liquidity.T

    def replace(self, **changes) -> "MarketParams":
        return replace(self, **changes)

    def with_weights(self, a0: float, a: float) -> "MarketParams":
        return replace(self, a0=a0, a=a)

    def alpha(self, t):
        return self.liquidity.alpha(t)

    def alpha0(self, t):
        return self.liquidity.alpha0(t)


# Impact-weight presets (a0, a) of the numerical experiments.
WEIGHT_PRESETS = ((0.5, 0.5), (0.9, 0.1), (0.0, 1.0))


# ---------------------------------------------------------------------------
# scalar kernels
# ---------------------------------------------------------------------------


def _check_interval(s, t, T):
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    tol = 1e-12 * max(T, 1.0)
    if np.any(s < -tol) or np.any(t > T + tol) or np.any(s > t + tol):
        raise DomainError(f"need 0 <= s <= t <= T={T}")
    return s, np.maximum(t, s)


def gauss_legendre_integral(f, s, t, T):
    """Integrate ``f`` over ``[s, t]`` with 32-node panels of width <= T/96."""
    s = float(s)
    t = float(t)
    if t <= s:
        return 0.0 * np.asarray(f(np.array([s])))[0]
    n_panels = max(1, math.ceil((t - s) / (T / PANELS_PER_HORIZON) - 1e-9))
    edges = np.linspace(s, t, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    weights = (half[:, None] * _GL_W[None, :]).ravel()
    values = np.asarray(f(nodes))
    return np.tensordot(weights, values, axes=(0, 0))


def delta_tilde(s, t, params: MarketParams):
    """``int_s^t du / alpha(u)``."""
    liq = params.liquidity
    s, t = _check_interval(s, t, liq.T)
    if liq.is_affine:
        if liq.alpha_slope != 0:
            return np.log(liq.alpha(s) / liq.alpha(t)) / liq.alpha_slope
        return (t - s) / liq.alpha_intercept
    out = np.vectorize(lambda x, y: gauss_legendre_integral(lambda u: 1.0 / liq.alpha(u), x, y, liq.T))(s, t)
    return out[()] if out.ndim == 0 else out


def eta(s, t, params: MarketParams):
    """Discount factor ``exp(-int_s^t a / alpha(u) du)``."""
    return np.exp(-params.a * delta_tilde(s, t, params))


def delta(s, t, params: MarketParams):
    """``int_s^t eta(u, t) / alpha(u) du``, equal to ``(1 - eta(s, t)) / a``."""
    dtil = delta_tilde(s, t, params)
    if params.a == 0:
        return dtil
    return -np.expm1(-params.a * dtil) / params.a


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------


def impact_matrix(params: MarketParams, minor_impact: Optional[float] = None) -> np.ndarray:
    """Coupling matrix ``A`` of the state ``(phi0, N, phibar)``.

    ``minor_impact`` replaces the impact weight perceived by the minor agents
    (rows two and three); it equals ``a`` in the mean field game.
    """
    a, a0 = params.a, params.a0
    am = a if minor_impact is None else minor_impact
    return np.array([[0.0, -a0, a], [-a, -am, 0.0], [a0, 0.0, am]])


def terminal_matrices(params: MarketParams, minor_impact=None, minor_penalty=None):
    """Return ``(D, Lambda)`` of the terminal map ``M_T = D Xi_T - Lambda X_T``."""
    a, a0, lam0 = params.a, params.a0, params.lam0
    am = a if minor_impact is None else minor_impact
    lm = params.lam if minor_penalty is None else minor_penalty
    D = np.array([[a0 + lam0, a0, 0.0], [a, am + lm, 0.0], [0.0, 0.0, lm]])
    Lam = np.diag([lam0, 0.0, params.lam])
    return D, Lam


def inverse_cost_diagonal(t, params: MarketParams) -> np.ndarray:
    """Diagonal of ``B(t)^{-1} = diag(1/alpha0, 1/alpha, 1/alpha)``, shape (..., 3)."""
    t = np.asarray(t, dtype=float)
    inv_a = 1.0 / params.alpha(t)
    return np.stack([1.0 / params.alpha0(t), inv_a, inv_a], axis=-1)


def inv3(m: np.ndarray, time=None) -> np.ndarray:
    """Invert stacked 3x3 matrices, refusing numerically singular ones.

    Singularity is judged on the cofactor determinant relative to Hadamard's
    bound, ``|det| < 1e-14 * prod_i ||row_i||``, which is insensitive to the
    very different row scales of ``I + D Pi``.  The inverse itself comes from
    pivoted LU, which stays accurate for such matrices where the cofactor
    formula does not.
    """
    m = np.asarray(m, dtype=float)
    c00 = m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1]
    c01 = m[..., 1, 2] * m[..., 2, 0] - m[..., 1, 0] * m[..., 2, 2]
    c02 = m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]
    det = m[..., 0, 0] * c00 + m[..., 0, 1] * c01 + m[..., 0, 2] * c02
    bound = np.prod(np.linalg.norm(m, axis=-1), axis=-1)
    bad = np.abs(det) < 1e-14 * bound
    if np.any(bad):
        where = None
        if time is not None:
            idx = np.argwhere(np.atleast_1d(bad))[0]
            where = np.atleast_1d(time)[idx[0]] if np.ndim(time) else time
        raise SingularMatrixError(
            f"3x3 matrix is numerically singular (|det| = {np.min(np.abs(det)):.3e})", time=where
        )
    return np.linalg.inv(m)


def _clock_matrix(params: MarketParams, c: float, minor_impact=None) -> np.ndarray:
    """``M = diag(1/c, 1, 1) A`` so that ``B(t)^{-1} A = M / alpha(t)``."""
    return np.diag([1.0 / c, 1.0, 1.0]) @ impact_matrix(params, minor_impact)


def integrated_exponential(tau, M: np.ndarray) -> np.ndarray:
    """``int_0^tau exp(-v M) dv`` by the block-exponential identity (stacked over tau)."""
    tau = np.asarray(tau, dtype=float)
    k = M.shape[-1]
    block = np.zeros(tau.shape + (2 * k, 2 * k))
    block[..., :k, :k] = -tau[..., None, None] * M
    block[..., :k, k:] = tau[..., None, None] * np.eye(k)
    return linalg.expm(block)[..., :k, k:]


def _resolve_method(params, method):
    c = params.liquidity.proportionality()
    if method == "auto":
        return ("expm", c) if c is not None else ("ode", None)
    if method == "expm":
        if c is None:
            raise DomainError("matrix-exponential path requires alpha0 proportional to alpha")
        return "expm", c
    if method in ("ode", "quadrature"):
        return method, c
    raise ValueError(f"unknown method {method!r}")


def _rk4_substeps(params, A, t0, t1, h_max):
    """Deterministic RK4 step schedule on ``[t0, t1]`` bounded by the local rate."""
    span = t1 - t0
    if span <= 0:
        return np.array([t0])
    rate = np.abs(A).sum(axis=1).max()
    probe = np.linspace(t0, t1, 9)
    alpha_min = float(min(params.alpha(probe).min(), params.alpha0(probe).min()))
    h = h_max if rate == 0 else min(h_max, RK4_RATE_FRACTION * alpha_min / rate)
    n = max(1, math.ceil(span / h - 1e-9))
    return np.linspace(t0, t1, n + 1)


def _rk4_matrix(params, A, t_points, h_max, inverse=False, start=None):
    """Propagate ``Y' = -B^{-1} A Y`` (or the inverse ``Y' = Y B^{-1} A``) from I.

    Returns Y at each of the ascending ``t_points``; integration starts at
    ``start`` (default: the first point).
    """
    t_points = np.asarray(t_points, dtype=float)
    t_prev = t_points[0] if start is None else float(start)
    Y = np.eye(3)
    out = np.empty((len(t_points), 3, 3))

    def rhs(t, Y):
        G = inverse_cost_diagonal(t, params)[:, None] * A
        return Y @ G if inverse else -G @ Y

    for i, t_next in enumerate(t_points):
        steps = _rk4_substeps(params, A, t_prev, t_next, h_max)
        for t0, t1 in zip(steps[:-1], steps[1:]):
            h = t1 - t0
            k1 = rhs(t0, Y)
            k2 = rhs(t0 + h / 2, Y + h / 2 * k1)
            k3 = rhs(t0 + h / 2, Y + h / 2 * k2)
            k4 = rhs(t1, Y + h * k3)
            Y = Y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i] = Y
        t_prev = t_next
    return out


def _rk4_pair(params, A, t_points, h_max, start):
    """Transition ``Tr`` and input response ``Pi`` from ``start`` to each point.

    Integrates ``Tr' = -G Tr`` and ``Pi' = -G Pi + B^{-1}`` with ``G = B^{-1} A``.
    """
    t_prev = float(start)
    tr = np.eye(3)
    pi = np.zeros((3, 3))
    out_tr = np.empty((len(t_points), 3, 3))
    out_pi = np.empty((len(t_points), 3, 3))

    def rhs(t, tr, pi):
        binv = inverse_cost_diagonal(t, params)
        G = binv[:, None] * A
        return -G @ tr, -G @ pi + np.diag(binv)

    for i, t_next in enumerate(t_points):
        steps = _rk4_substeps(params, A, t_prev, t_next, h_max)
        for t0, t1 in zip(steps[:-1], steps[1:]):
            h = t1 - t0
            a1, b1 = rhs(t0, tr, pi)
            a2, b2 = rhs(t0 + h / 2, tr + h / 2 * a1, pi + h / 2 * b1)
            a3, b3 = rhs(t0 + h / 2, tr + h / 2 * a2, pi + h / 2 * b2)
            a4, b4 = rhs(t1, tr + h * a3, pi + h * b3)
            tr = tr + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
            pi = pi + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
        out_tr[i], out_pi[i] = tr, pi
        t_prev = t_next
    return out_tr, out_pi


def _default_h_max(T):
    # one eighth of the default 96-step grid
    return T / (8 * PANELS_PER_HORIZON)


def fundamental_matrix(t, params: MarketParams, method: str = "auto", minor_impact=None) -> np.ndarray:
    """``Phi(t)``, the fundamental solution of ``Xi' + B(t)^{-1} A Xi = 0``.

    ``method`` is ``"auto"`` (matrix exponential when ``alpha0 = c alpha``,
    RK4 otherwise), ``"expm"`` or ``"ode"``.
    """
    T = params.T
    _check_interval(0.0, t, T)
    A = impact_matrix(params, minor_impact)
    kind, c = _resolve_method(params, method)
    if kind == "expm":
        M = _clock_matrix(params, c, minor_impact)
        return linalg.expm(-float(delta_tilde(0.0, t, params)) * M)
    return _rk4_matrix(params, A, [float(t)], _default_h_max(T), start=0.0)[0]


def _gl_nodes(s, t, T):
    n_panels = max(1, math.ceil((t - s) / (T / PANELS_PER_HORIZON) - 1e-9))
    edges = np.linspace(s, t, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    return (mid[:, None] + half[:, None] * _GL_X).ravel(), (half[:, None] * _GL_W).ravel()


def pi_matrix(s, t, params: MarketParams, method: str = "auto", minor_impact=None) -> np.ndarray:
    """``Pi_{s,t} = Phi(t) int_s^t Phi(u)^{-1} B(u)^{-1} du``.

    With ``alpha0 = c alpha`` this equals ``int_0^{tau} exp(-v M) dv diag(1/c, 1, 1)``
    with ``tau = int_s^t du / alpha(u)``; otherwise (or with
    ``method="quadrature"``) composite Gauss-Legendre on RK4 values of ``Phi``.
    """
    T = params.T
    s, t = (float(x) for x in _check_interval(s, t, T))
    kind, c = _resolve_method(params, method)
    if kind == "expm":
        tau = float(delta_tilde(s, t, params))
        return integrated_exponential(tau, _clock_matrix(params, c, minor_impact)) @ np.diag([1.0 / c, 1.0, 1.0])
    if t <= s:
        return np.zeros((3, 3))
    A = impact_matrix(params, minor_impact)
    nodes, weights = _gl_nodes(s, t, T)
    # Phi(s) Phi(u)^{-1} at the nodes, then Phi(t) Phi(s)^{-1} in front.
    psi = _rk4_matrix(params, A, nodes, _default_h_max(T), inverse=True, start=s)
    trans = _rk4_matrix(params, A, [t], _default_h_max(T), start=s)[0]
    binv = inverse_cost_diagonal(nodes, params)
    integral = np.einsum("q,qij,qj->ij", weights, psi, binv)
    return trans @ integral


# ---------------------------------------------------------------------------
# precomputed tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellNodes:
    """Gauss-Legendre nodes inside every grid cell and the kernels from the cell start.

    Arrays are indexed ``[k, i]`` for cell ``k`` and node ``i``: ``u`` node
    times, ``w`` quadrature weights, ``tau = DeltaTilde_{t_k, u}``, ``Tr`` the
    transition ``Phi(u) Phi(t_k)^{-1}`` and ``Pi = Pi_{t_k, u}``.
    """

    u: np.ndarray
    w: np.ndarray
    alpha: np.ndarray
    alpha0: np.ndarray
    tau: np.ndarray
    Tr: np.ndarray
    Pi: np.ndarray


@dataclass(frozen=True)
class KernelTable:
    """Kernels evaluated on every grid pair ``(t_j, t_k)``, ``j <= k``.

    Arrays indexed ``[j, k]`` are upper-triangular: entries with ``j > k`` are
    zero and never used.  ``Trans[j, k] = Phi(t_k) Phi(t_j)^{-1}``.

    ``Trans_ext`` and ``Pi_ext`` hold the same products accumulated in
    extended precision (``np.longdouble``).  The closed-form equilibrium
    cancels terms of order ``|Phi(T)| * S`` down to positions of order one, so
    the solvers use these to keep the algebraic identities tight.
    """

    grid: TimeGrid
    params: MarketParams
    minor_impact: Optional[float]
    alpha: np.ndarray
    alpha0: np.ndarray
    eta: np.ndarray
    Delta: np.ndarray
    DeltaTilde: np.ndarray
    Phi: np.ndarray
    PhiInv: np.ndarray
    Trans: np.ndarray
    Pi: np.ndarray
    Trans_ext: np.ndarray
    Pi_ext: np.ndarray
    cell_trans: np.ndarray
    cell_pi: np.ndarray
    # per-table memo for solver weights (never part of equality or repr)
    cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @classmethod
    def build(cls, params: MarketParams, grid: TimeGrid, minor_impact=None, method="auto") -> "KernelTable":
        if not np.isclose(grid.T, params.T):
            raise DomainError(f"grid horizon {grid.T} differs from liquidity horizon {params.T}")
        t = grid.times
        n = grid.n_steps
        upper = t[:, None] <= t[None, :]
        if params.liquidity.is_affine:
            s_mat = np.where(upper, t[:, None], t[None, :])
            dtil = np.where(upper, delta_tilde(s_mat, t[None, :] + 0 * s_mat, params), 0.0)
        else:
            cells = np.array([delta_tilde(t[k], t[k + 1], params) for k in range(n)])
            clock = np.concatenate([[0.0], np.cumsum(cells)])
            dtil = np.where(upper, clock[None, :] - clock[:, None], 0.0)
        eta_tab = np.where(upper, np.exp(-params.a * dtil), 0.0)
        if params.a == 0:
            delta_tab = dtil.copy()
        else:
            delta_tab = np.where(upper, -np.expm1(-params.a * dtil) / params.a, 0.0)

        A = impact_matrix(params, minor_impact)
        kind, c = _resolve_method(params, method)
        if kind == "expm":
            M = _clock_matrix(params, c, minor_impact)
            tau = np.diagonal(dtil, offset=1)
            cell_trans = linalg.expm(-tau[:, None, None] * M)
            cell_pi = integrated_exponential(tau, M) @ np.diag([1.0 / c, 1.0, 1.0])
        else:
            cell_trans = np.empty((n, 3, 3))
            cell_pi = np.empty((n, 3, 3))
            h_max = grid.dt / 8
            for k in range(n):
                cell_trans[k] = _rk4_matrix(params, A, [t[k + 1]], h_max, start=t[k])[0]
                nodes = t[k] + 0.5 * grid.dt * (_GL_X + 1.0)
                psi = _rk4_matrix(params, A, nodes, h_max, inverse=True, start=t[k])
                binv = inverse_cost_diagonal(nodes, params)
                integral = np.einsum("q,qij,qj->ij", 0.5 * grid.dt * _GL_W, psi, binv)
                cell_pi[k] = cell_trans[k] @ integral

        ext = np.longdouble
        ct = cell_trans.astype(ext)
        cp = cell_pi.astype(ext)
        trans = np.zeros((n + 1, n + 1, 3, 3), dtype=ext)
        pi = np.zeros((n + 1, n + 1, 3, 3), dtype=ext)
        eye = np.eye(3, dtype=ext)
        trans[0, 0] = eye
        for k in range(n):
            trans[: k + 1, k + 1] = ct[k] @ trans[: k + 1, k]
            pi[: k + 1, k + 1] = ct[k] @ pi[: k + 1, k] + cp[k]
            trans[k + 1, k + 1] = eye
        trans_ext, pi_ext = trans, pi
        trans, pi = trans.astype(float), pi.astype(float)
        eye = np.eye(3)
        phi = trans[0].copy()
        # chained cell inverses; inverting Phi(t) itself is badly conditioned
        cell_inv = inv3(cell_trans, time=t[1:])
        phi_inv = np.empty_like(phi)
        phi_inv[0] = eye
        for k in range(n):
            phi_inv[k + 1] = phi_inv[k] @ cell_inv[k]
        arrays = dict(
            alpha=params.alpha(t), alpha0=params.alpha0(t), eta=eta_tab, Delta=delta_tab,
            DeltaTilde=dtil, Phi=phi, PhiInv=phi_inv, Trans=trans, Pi=pi,
            Trans_ext=trans_ext, Pi_ext=pi_ext,
            cell_trans=cell_trans, cell_pi=cell_pi,
        )
        for arr in arrays.values():
            arr.setflags(write=False)
        return cls(grid=grid, params=params, minor_impact=minor_impact, **arrays)

    @property
    def n(self) -> int:
        return self.grid.n_steps

    def cell_nodes(self, q: int = 8) -> CellNodes:
        """Kernels at ``q`` Gauss-Legendre nodes per cell (memoised)."""
        key = ("cell_nodes", q)
        if key in self.cache:
            return self.cache[key]
        params, t, n = self.params, self.grid.times, self.n
        x, wq = np.polynomial.legendre.leggauss(q)
        half = 0.5 * self.grid.dt
        u = t[:-1, None] + half * (x[None, :] + 1.0)
        w = np.broadcast_to(half * wq, (n, q)).copy()
        liq = params.liquidity
        if liq.is_affine:
            tau = delta_tilde(np.broadcast_to(t[:-1, None], u.shape), u, params)
        else:
            tau = np.array(
                [[gauss_legendre_integral(lambda v: 1.0 / liq.alpha(v), t[k], uk, liq.T) for uk in u[k]] for k in range(n)]
            )
        kind, c = _resolve_method(params, "auto")
        if kind == "expm":
            M = _clock_matrix(params, c, self.minor_impact)
            Tr = linalg.expm(-tau[..., None, None] * M)
            Pi = integrated_exponential(tau, M) @ np.diag([1.0 / c, 1.0, 1.0])
        else:
            A = impact_matrix(params, self.minor_impact)
            Tr = np.empty((n, q, 3, 3))
            Pi = np.empty((n, q, 3, 3))
            for k in range(n):
                Tr[k], Pi[k] = _rk4_pair(params, A, u[k], self.grid.dt / 8, start=t[k])
        nodes = CellNodes(u=u, w=w, alpha=params.alpha(u), alpha0=params.alpha0(u), tau=tau, Tr=Tr, Pi=Pi)
        for arr in (nodes.u, nodes.w, nodes.alpha, nodes.alpha0, nodes.tau, nodes.Tr, nodes.Pi):
            arr.setflags(write=False)
        self.cache[key] = nodes
        return nodes
