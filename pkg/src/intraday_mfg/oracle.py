"""Independent checks of the closed-form equilibria.

* :func:`deterministic_bvp` solves the zero-noise adjoint system by shooting:
  forward RK4 on the state, Newton on the three terminal identities.  It shares
  no code with the closed forms beyond the parameter containers.
* :func:`martingale_residual_test` regresses increments of candidate
  martingales on an adapted basis.
* :func:`foc_test` evaluates the first-order functionals of the best
  responses against randomized adapted test processes.  Positions are read on
  the grid only; inside a cell they are interpolated by the unique path of the
  model's linear dynamics with constant forcing that hits both node values
  (exact for the piecewise-constant information model), and the Monte Carlo
  means use control variates built from the exogenous martingales only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import DomainError, SingularMatrixError
from .grid import TimeGrid
from .kernels import KernelTable, MarketParams, impact_matrix
from .scenarios import ScenarioPath, write_columns

__all__ = [
    "AdjointState",
    "deterministic_bvp",
    "martingale_residual_test",
    "foc_test",
    "ode_residual",
    "TestRow",
    "Report",
]

# RK4 substeps per grid cell in the shooting integrator (at least 8).
SUBSTEPS_PER_CELL = 16
MIN_SUBSTEPS = 8
# The zero-noise shooting residual is affine; a second Newton step may only
# move the solution by rounding (relative to the scale of the unknowns).
NEWTON_AFFINE_RTOL = 1e-9
Z_THRESHOLD = 3.0


# ---------------------------------------------------------------------------
# deterministic boundary-value oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdjointState:
    """Zero-noise solution: state path ``Xi`` (n + 1, 3) and constant ``Mvec`` (3,)."""

    grid: TimeGrid
    Xi: np.ndarray
    Mvec: np.ndarray
    terminal_residual: float
    newton_update: float

    @property
    def phi0(self):
        return self.Xi[:, 0]

    @property
    def N(self):
        return self.Xi[:, 1]

    @property
    def phibar(self):
        return self.Xi[:, 2]


def _system(params: MarketParams):
    a, a0, lam, lam0 = params.a, params.a0, params.lam, params.lam0
    A = np.array([[0.0, -a0, a], [-a, -a, 0.0], [a0, 0.0, a]])
    D = np.array([[a0 + lam0, a0, 0.0], [a, a + lam, 0.0], [0.0, 0.0, lam]])
    Lam = np.diag([lam0, 0.0, lam])
    return A, D, Lam


def _shoot(params, grid, S_path, A, substeps):
    """Integrate ``Xi' = -B^{-1}(A Xi + m + e S)`` from ``Xi_0 = 0``.

    Column 0 carries ``m = 0``, columns 1..3 the unit responses, so the
    terminal state is ``Y[:, 0] + Y[:, 1:] @ m`` for any constant ``m``.
    """
    e = np.array([1.0, 0.0, 1.0])
    t = grid.times
    # cost coefficients at every RK4 stage time (substep starts, midpoints, ends)
    h = grid.dt / substeps
    stage_t = t[0] + h * np.arange(0, 2 * grid.n_steps * substeps + 1) / 2.0
    a0_inv, a_inv = 1.0 / params.alpha0(stage_t), 1.0 / params.alpha(stage_t)
    binv = np.stack([a0_inv, a_inv, a_inv], axis=-1)[:, :, None]
    Y = np.zeros((3, 4))
    path = np.empty((grid.n_points, 3, 4))
    path[0] = Y
    forcing = np.zeros((3, 4))
    forcing[:, 1:] = np.eye(3)
    for k in range(grid.n_steps):
        forcing[:, 0] = e * S_path[k]
        for j in range(substeps):
            i = 2 * (k * substeps + j)
            b0, b1, b2 = binv[i], binv[i + 1], binv[i + 2]
            k1 = -b0 * (A @ Y + forcing)
            k2 = -b1 * (A @ (Y + h / 2 * k1) + forcing)
            k3 = -b1 * (A @ (Y + h / 2 * k2) + forcing)
            k4 = -b2 * (A @ (Y + h * k3) + forcing)
            Y = Y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        path[k + 1] = Y
    return path


def deterministic_bvp(
    params: MarketParams,
    S_path,
    X0_T: float = 0.0,
    Xbar_T: float = 0.0,
    grid: Optional[TimeGrid] = None,
    substeps: int = SUBSTEPS_PER_CELL,
) -> AdjointState:
    """Solve the zero-noise equilibrium system by shooting on the martingale constants.

    ``S_path`` is a deterministic price on the grid (a scalar means constant),
    held constant on each grid cell.  The terminal residual
    ``m - (D Xi_T(m) - Lambda (X0_T, 0, Xbar_T))`` is affine in ``m``; its
    Jacobian comes from the unit-response columns and a second Newton step is
    asserted to change nothing beyond rounding.
    """
    grid = grid or TimeGrid(params.T, 96)
    if not np.isclose(grid.T, params.T):
        raise DomainError("grid horizon differs from the liquidity horizon")
    if substeps < MIN_SUBSTEPS:
        raise DomainError(f"need at least {MIN_SUBSTEPS} RK4 substeps per cell")
    S_path = np.broadcast_to(np.asarray(S_path, dtype=float), (grid.n_points,))
    A, D, Lam = _system(params)
    target = Lam @ np.array([X0_T, 0.0, Xbar_T])
    path = _shoot(params, grid, S_path, A, substeps)
    base, sens = path[-1][:, 0], path[-1][:, 1:]

    def residual(m):
        return m - (D @ (base + sens @ m) - target)

    jac = np.eye(3) - D @ sens
    if abs(np.linalg.det(jac)) < 1e-14 * np.prod(np.linalg.norm(jac, axis=1)):
        raise SingularMatrixError("shooting Jacobian is singular", time=0.0)
    m = np.zeros(3)
    m = m - np.linalg.solve(jac, residual(m))
    second = -np.linalg.solve(jac, residual(m))
    scale = max(1.0, np.abs(m).max())
    if np.abs(second).max() > NEWTON_AFFINE_RTOL * scale:
        raise ArithmeticError("shooting residual is not affine: second Newton step moved the solution")
    m = m + second
    Xi = path[:, :, 0] + path[:, :, 1:] @ m
    return AdjointState(
        grid=grid,
        Xi=Xi,
        Mvec=m,
        terminal_residual=float(np.abs(residual(m)).max()),
        newton_update=float(np.abs(second).max()),
    )


# ---------------------------------------------------------------------------
# statistical tests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestRow:
    """One statistic: estimate, standard error and its verdict."""

    __test__ = False  # not a pytest class

    test: str
    name: str
    estimate: float
    se: float

    @property
    def z(self) -> float:
        if self.se == 0:
            return 0.0 if self.estimate == 0 else np.inf
        return self.estimate / self.se

    @property
    def passed(self) -> bool:
        return bool(abs(self.estimate) <= Z_THRESHOLD * self.se)


@dataclass
class Report:
    """Collection of statistics with a PASS/FAIL verdict per row."""

    title: str
    rows: List[TestRow] = field(default_factory=list)
    notes: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def failures(self) -> List[TestRow]:
        return [r for r in self.rows if not r.passed]

    def text(self) -> str:
        lines = [f"{self.title}: {'PASS' if self.passed else 'FAIL'}"]
        for r in self.rows:
            lines.append(
                f"  {'PASS' if r.passed else 'FAIL'}  {r.test:<12} {r.name:<28} "
                f"est={r.estimate: .4e}  se={r.se:.4e}  z={r.z: .2f}"
            )
        for key, value in self.notes.items():
            lines.append(f"  {key} = {value:.6g}")
        return "\n".join(lines)

    def to_csv(self, target=None) -> str:
        header = ["test", "name", "estimate", "se", "z", "passed"]
        cols = [
            [r.test for r in self.rows],
            [r.name for r in self.rows],
            [r.estimate for r in self.rows],
            [r.se for r in self.rows],
            [r.z for r in self.rows],
            [float(r.passed) for r in self.rows],
        ]
        return _write_mixed(header, cols, target)


def _write_mixed(header, cols, target):
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in zip(*cols):
        w.writerow([v if isinstance(v, str) else repr(float(v)) for v in row])
    text = buf.getvalue()
    if target is not None:
        if hasattr(target, "write"):
            target.write(text)
        else:
            with open(target, "w", newline="") as fh:
                fh.write(text)
    return text


def _cluster_ols(y, X):
    """OLS of pooled ``y`` (n_sim, n_obs) on ``X`` (n_sim, n_obs, p) with
    standard errors clustered by scenario."""
    n_sim = y.shape[0]
    Xf = X.reshape(-1, X.shape[-1])
    yf = y.reshape(-1)
    XtX = Xf.T @ Xf
    beta = np.linalg.solve(XtX, Xf.T @ yf)
    resid = (y - X @ beta)[..., None] * X  # (n_sim, n_obs, p)
    scores = resid.sum(axis=1)
    bread = np.linalg.inv(XtX)
    meat = scores.T @ scores * n_sim / max(n_sim - 1, 1)
    cov = bread @ meat @ bread
    return beta, np.sqrt(np.maximum(np.diag(cov), 0.0))


def martingale_residual_test(
    paths: Dict[str, np.ndarray], scenarios: ScenarioPath, title: str = "martingale residuals"
) -> Report:
    """Regress increments of each candidate on ``(1, t, S, Xbar, X0)`` at the left point.

    Candidates are arrays ``(n_sim, n + 1)`` aligned with the batched
    ``scenarios``.  Non-constant regressors are centred and scaled, so the
    constant coefficient is the mean increment.  PASS iff every coefficient
    is within three clustered standard errors of zero.
    """
    if scenarios.S.ndim != 2:
        raise DomainError("martingale test needs a batch of scenarios")
    n_sim, n1 = scenarios.S.shape
    t = np.broadcast_to(scenarios.grid.times, (n_sim, n1))
    basis = {"t": t, "S": scenarios.S, "Xbar": scenarios.Xbar, "X0": scenarios.X0}
    cols, names = [np.ones((n_sim, n1 - 1))], ["const"]
    for key, values in basis.items():
        v = values[:, :-1]
        sd = v.std()
        if sd > 0:
            cols.append((v - v.mean()) / sd)
            names.append(key)
    X = np.stack(cols, axis=-1)
    report = Report(title)
    for label, path in paths.items():
        path = np.asarray(path, dtype=float)
        if path.shape != (n_sim, n1):
            raise DomainError(f"candidate {label!r} has shape {path.shape}, expected {(n_sim, n1)}")
        y = np.diff(path, axis=1)
        beta, se = _cluster_ols(y, X)
        for name, b, s in zip(names, beta, se):
            report.rows.append(TestRow(label, name, float(b), float(s)))
    return report


def _legendre(degree, x):
    return np.polynomial.legendre.legval(x, np.eye(degree + 1)[degree])


def _test_processes(states: Dict[str, np.ndarray], grid: TimeGrid, n_proc: int, seed: int):
    """``nu_m(t_k) = P_m(t_k) * Z_m(t_k)``: random Legendre mixes (degree <= 3) times
    random combinations of scaled adapted states.  The first process is the constant 1."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), 7))))
    x = 2.0 * grid.times[:-1] / grid.T - 1.0
    legendre = np.stack([_legendre(d, x) for d in range(4)])
    names = list(states)
    scaled = []
    for name in names:
        v = states[name][:, :-1]
        scale = v.std(axis=0).max()
        scaled.append(v / scale if scale > 0 else np.zeros_like(v))
    scaled = np.stack(scaled)  # (n_states, n_sim, n)
    out = []
    for m in range(n_proc):
        if m == 0:
            out.append(("constant", np.ones_like(scaled[0])))
            continue
        poly = rng.standard_normal(4) @ legendre
        mix = rng.standard_normal(len(names) + 1)
        z = mix[0] + np.tensordot(mix[1:], scaled, axes=(0, 0))
        out.append((f"nu_{m:02d}", poly * z / np.sqrt(1.0 + mix @ mix)))
    return out


def _cell_integrals(Xi, table: KernelTable, q: int = 8):
    """Exact cell integrals ``(int Xi dt, int B Xi' dt)`` of the interpolant
    that solves ``B Xi' + A Xi + c = 0`` with ``c`` constant on each cell and
    matches the node values at both ends."""
    nodes = table.cell_nodes(q)
    A = impact_matrix(table.params, table.minor_impact)
    left, right = Xi[..., :-1, :], Xi[..., 1:, :]
    rhs = np.einsum("kab,...kb->...ka", table.cell_trans, left) - right
    c = np.linalg.solve(table.cell_pi, rhs[..., None])[..., 0]
    inside = np.einsum("kiab,...kb->...kia", nodes.Tr, left) - np.einsum("kiab,...kb->...kia", nodes.Pi, c)
    integral = np.einsum("ki,...kia->...ka", nodes.w, inside)
    rate = -(integral @ A.T) - c * table.grid.dt
    return integral, rate


def _idiosyncratic_integrals(psi, table: KernelTable, q: int = 8):
    """Same for a position ``psi`` with ``alpha psi' = -c`` on each cell (no self impact)."""
    nodes = table.cell_nodes(q)
    tau = np.diagonal(table.DeltaTilde, offset=1)
    c = (psi[..., :-1] - psi[..., 1:]) / tau
    inside = psi[..., :-1, None] - c[..., None] * nodes.tau
    return (inside * nodes.w).sum(axis=-1), -c * table.grid.dt


def _foc_functional(nu, running, terminal, dt):
    """Per-scenario ``sum_k nu_k running_k + terminal * sum_k nu_k dt``."""
    return (nu * running).sum(axis=-1) + terminal * nu.sum(axis=-1) * dt


def _control_variates(nu, drivers, grid):
    """Zero-mean controls ``sum_k nu_k dt sum_{j >= k} g(t_j) dD_j`` for each
    exogenous martingale ``D``.  ``g`` runs over Legendre polynomials of degree
    <= 3 and indicators of the last two cells, where the terminal penalty
    concentrates the response to late forecast news."""
    x = 2.0 * grid.times[:-1] / grid.T - 1.0
    basis = [_legendre(m, x) for m in range(4)]
    for cell in (1, 2):
        g = np.zeros(grid.n_steps)
        g[-cell] = 1.0
        basis.append(g)
    cols = []
    for D in drivers:
        dD = np.diff(D, axis=-1)
        for g in basis:
            future = np.cumsum((g * dD)[..., ::-1], axis=-1)[..., ::-1]
            cols.append((nu * future).sum(axis=-1) * grid.dt)
    return np.stack(cols, axis=-1)


def _mean_row(group, name, vals, controls):
    """Control-variate mean of ``vals`` with a heteroskedasticity-robust SE."""
    # the controls have known mean zero, so they enter uncentred
    sd = controls.std(axis=0)
    keep = sd > 0
    X = np.concatenate([np.ones((len(vals), 1)), controls[:, keep] / sd[keep]], axis=1)
    beta, se = _cluster_ols(vals[:, None], X[:, None, :])
    return TestRow(group, name, float(beta[0]), float(se[0]))


def foc_test(
    equilibrium,
    scenarios: ScenarioPath,
    params: MarketParams,
    n_test_processes: int = 20,
    seed: int = 0,
    minor_paths: Optional[np.ndarray] = None,
    agent_index: int = 0,
    table: Optional[KernelTable] = None,
    major: bool = True,
) -> Report:
    """Monte Carlo first-order conditions of the best responses.

    For each adapted test process ``nu`` the functional
    ``E[int nu (alpha phibar' + S + a0 phi0 + a phibar) dt + lam (phibar_T - Xbar_T) int nu dt]``
    must vanish (group ``minor-mean``).  If ``minor_paths`` (positions of
    agent ``agent_index``) are given, the same check runs on the individual
    position against ``X^i`` (``minor-agent``).  With ``major`` the major
    agent's condition
    ``E[int nu (alpha0 phi0' + S + a phibar - a0 N) dt + (a0 (N_T + phi0_T) + lam0 (phi0_T - X0_T)) int nu dt] = 0``
    is tested as well.  Only ``equilibrium.Xi`` is read.
    """
    grid = scenarios.grid
    if scenarios.S.ndim != 2:
        raise DomainError("foc_test needs a batch of scenarios")
    if table is None:
        table = KernelTable.build(params, grid)
    else:
        grid.check_same(table.grid)
    Xi = np.asarray(equilibrium.Xi, dtype=float)
    phi0, phibar = Xi[..., 0], Xi[..., 2]
    dt = grid.dt
    integral, rate = _cell_integrals(Xi, table)
    # int (S + a0 phi0 + a phibar) dt with S frozen on each cell
    drive = scenarios.S[:, :-1] * dt + params.a0 * integral[..., 0] + params.a * integral[..., 2]
    states = {
        "S": scenarios.S - params.S0,
        "Xbar": scenarios.Xbar,
        "X0": scenarios.X0,
        "phi0": phi0,
        "phibar": phibar,
    }
    drivers = [scenarios.S, scenarios.Xbar, scenarios.X0]
    report = Report("first-order conditions")
    running = rate[..., 2] + drive
    terminal = params.lam * (phibar[:, -1] - scenarios.Xbar[:, -1])
    for name, nu in _test_processes(states, grid, n_test_processes, seed):
        vals = _foc_functional(nu, running, terminal, dt)
        report.rows.append(_mean_row("minor-mean", name, vals, _control_variates(nu, drivers, grid)))
    if minor_paths is not None:
        phi_i = np.asarray(minor_paths, dtype=float)
        _, rate_i = _idiosyncratic_integrals(phi_i - phibar, table)
        running_i = running + rate_i
        X_i = scenarios.X(agent_index)
        states_i = dict(states, Xcheck=scenarios.Xcheck[:, agent_index, :])
        controls_drivers = drivers + [scenarios.Xcheck[:, agent_index, :]]
        for name, nu in _test_processes(states_i, grid, n_test_processes, seed + 1):
            vals = _foc_functional(nu, running_i, params.lam * (phi_i[:, -1] - X_i[:, -1]), dt)
            report.rows.append(_mean_row("minor-agent", name, vals, _control_variates(nu, controls_drivers, grid)))
    if major:
        N_T, phi0_T = Xi[:, -1, 1], phi0[:, -1]
        running0 = rate[..., 0] + scenarios.S[:, :-1] * dt - params.a0 * integral[..., 1] + params.a * integral[..., 2]
        terminal0 = params.a0 * (N_T + phi0_T) + params.lam0 * (phi0_T - scenarios.X0[:, -1])
        for name, nu in _test_processes(states, grid, n_test_processes, seed + 2):
            vals = _foc_functional(nu, running0, terminal0, dt)
            report.rows.append(_mean_row("major", name, vals, _control_variates(nu, drivers, grid)))
    return report


def ode_residual(equilibrium, scenario: ScenarioPath, params: MarketParams) -> np.ndarray:
    """Forward-difference residual of ``B^{-1} A Xi + Xi' + B^{-1}(M + e S)`` on the grid.

    Returns an array ``(..., n, 3)``; it is O(dt) for the closed-form paths.
    """
    A, _, _ = _system(params)
    t = scenario.grid.times[:-1]
    binv = np.stack([1.0 / params.alpha0(t), 1.0 / params.alpha(t), 1.0 / params.alpha(t)], axis=-1)
    Xi = equilibrium.Xi
    e = np.array([1.0, 0.0, 1.0])
    drift = Xi[..., :-1, :] @ A.T + equilibrium.Mvec[..., :-1, :] + scenario.S[..., :-1, None] * e
    return binv * drift + np.diff(Xi, axis=-2) / scenario.grid.dt


def bvp_to_csv(state: AdjointState, target=None) -> str:
    header = ["t", "phi0", "N", "phibar", "M0", "M", "Ybar"]
    n1 = state.grid.n_points
    cols = [state.grid.times, state.phi0, state.N, state.phibar] + [np.full(n1, v) for v in state.Mvec]
    return write_columns(header, cols, target)
