"""Joint sample paths of the fundamental price and the forecast martingales.

All drivers are arithmetic Brownian motions, so Gaussian increments are exact
on any grid.  Randomness comes from Philox4x32-10 generators keyed by
``SeedSequence((seed, driver))`` with one stream per (scenario, driver family):
driver 0 is the price, 1 the common forecast, 2 the major forecast and 3 the
idiosyncratic forecasts (drawn row by row, so the first ``m`` minor paths do
not depend on how many are requested).  Ensemble member ``k`` uses
``seed = base_seed ^ k``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Iterator, Optional

import numpy as np

from .errors import DomainError
from .grid import TimeGrid
from .kernels import MarketParams

__all__ = [
    "TimeGrid",
    "ScenarioPath",
    "simulate",
    "simulate_batch",
    "ensemble",
    "ensemble_batch",
    "scenario_seed",
    "deterministic_scenario",
    "write_columns",
    "read_columns",
]

DRIVER_S, DRIVER_XBAR, DRIVER_X0, DRIVER_XCHECK = range(4)


def scenario_seed(base_seed: int, k: int) -> int:
    return int(base_seed) ^ int(k)


def _generator(seed: int, driver: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), driver))))


@dataclass(frozen=True)
class ScenarioPath:
    """One joint realisation (or a stack of them along leading axes).

    Arrays have shape ``(..., n + 1)``; ``Xcheck`` has shape
    ``(..., n_minor, n + 1)``.  ``S_drift`` optionally holds a deterministic
    mean ``m(t)`` with ``S - m`` a martingale; None means ``S`` is a martingale.
    """

    grid: TimeGrid
    S: np.ndarray
    Xbar: np.ndarray
    X0: np.ndarray
    Xcheck: np.ndarray
    S_drift: Optional[np.ndarray] = None

    def __post_init__(self):
        n1 = self.grid.n_points
        for name in ("S", "Xbar", "X0"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape[-1] != n1:
                raise DomainError(f"{name} has {arr.shape[-1]} points, grid has {n1}")
            object.__setattr__(self, name, arr)
        xc = np.asarray(self.Xcheck, dtype=float)
        if xc.ndim == self.S.ndim:  # no minor axis supplied
            xc = xc[..., None, :]
        if xc.shape[-1] != n1:
            raise DomainError("Xcheck has the wrong number of grid points")
        object.__setattr__(self, "Xcheck", xc)
        if self.S_drift is not None:
            drift = np.asarray(self.S_drift, dtype=float)
            if drift.shape != (n1,):
                raise DomainError("S_drift must be a deterministic path of shape (n + 1,)")
            object.__setattr__(self, "S_drift", drift)

    @property
    def n_minor(self) -> int:
        return self.Xcheck.shape[-2]

    @property
    def batch_shape(self) -> tuple:
        return self.S.shape[:-1]

    @property
    def is_martingale(self) -> bool:
        return self.S_drift is None

    def X(self, i: int) -> np.ndarray:
        """Full forecast ``Xbar + Xcheck[i]`` of minor agent ``i`` (0-based)."""
        return self.Xbar + self.Xcheck[..., i, :]

    def member(self, k: int) -> "ScenarioPath":
        """Scenario ``k`` of a batch."""
        return replace(self, S=self.S[k], Xbar=self.Xbar[k], X0=self.X0[k], Xcheck=self.Xcheck[k])

    def with_minors(self, n_minor: int) -> "ScenarioPath":
        if n_minor > self.n_minor:
            raise DomainError(f"scenario holds {self.n_minor} minor paths, {n_minor} requested")
        return replace(self, Xcheck=self.Xcheck[..., :n_minor, :])

    def __iter__(self) -> Iterator["ScenarioPath"]:
        if not self.batch_shape:
            raise TypeError("single scenario is not iterable")
        return (self.member(k) for k in range(self.batch_shape[0]))

    def to_csv(self, target=None) -> str:
        """Write ``t,S,Xbar,X0,Xcheck_1..Xcheck_N``; returns the text."""
        if self.batch_shape:
            raise DomainError("CSV export needs a single scenario")
        header = ["t", "S", "Xbar", "X0"] + [f"Xcheck_{i + 1}" for i in range(self.n_minor)]
        cols = [self.grid.times, self.S, self.Xbar, self.X0] + list(self.Xcheck)
        return write_columns(header, cols, target)

    @classmethod
    def from_csv(cls, source, T: Optional[float] = None) -> "ScenarioPath":
        """Read a path written by :meth:`to_csv` (or an external one in that layout)."""
        header, data = read_columns(source)
        t = data[:, header.index("t")]
        n = len(t) - 1
        grid = TimeGrid(float(t[-1]) if T is None else T, n)
        if not np.allclose(t, grid.times, atol=1e-9 * grid.T):
            raise DomainError("CSV times are not a uniform grid starting at 0")
        minors = sorted(
            (h for h in header if h.startswith("Xcheck_")), key=lambda h: int(h.split("_")[1])
        )
        xcheck = np.array([data[:, header.index(h)] for h in minors]).reshape(len(minors), n + 1)
        return cls(
            grid,
            S=data[:, header.index("S")],
            Xbar=data[:, header.index("Xbar")],
            X0=data[:, header.index("X0")],
            Xcheck=xcheck,
        )


def _fmt(x: float) -> str:
    return repr(float(x))


def write_columns(header, columns, target=None) -> str:
    """Write equal-length columns as CSV with round-trip float formatting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in zip(*columns):
        writer.writerow([_fmt(v) for v in row])
    text = buf.getvalue()
    if target is not None:
        if hasattr(target, "write"):
            target.write(text)
        else:
            with open(target, "w", newline="") as fh:
                fh.write(text)
    return text


def read_columns(source):
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(source, newline="") as fh:
            text = fh.read()
    rows = list(csv.reader(io.StringIO(text)))
    header = [h.strip() for h in rows[0]]
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    return header, data


def _brownian(rng, sigma, dt, shape):
    incr = rng.standard_normal(shape) * (sigma * np.sqrt(dt))
    out = np.zeros(shape[:-1] + (shape[-1] + 1,))
    np.cumsum(incr, axis=-1, out=out[..., 1:])
    return out


def simulate(
    params: MarketParams, grid: TimeGrid, n_minor: int, seed: int, forecast_sign: float = 1.0
) -> ScenarioPath:
    """Simulate one scenario.

    ``forecast_sign`` multiplies every forecast path (``-1`` reads the
    forecasts as production rather than demand).
    """
    if n_minor < 0:
        raise DomainError("n_minor must be >= 0")
    if not np.isclose(grid.T, params.T):
        raise DomainError(f"grid horizon {grid.T} differs from liquidity horizon {params.T}")
    n, dt = grid.n_steps, grid.dt
    S = params.S0 + _brownian(_generator(seed, DRIVER_S), params.sigma_S, dt, (n,))
    Xbar = params.Xbar0 + _brownian(_generator(seed, DRIVER_XBAR), params.sigma_bar, dt, (n,))
    X0 = params.X0_0 + _brownian(_generator(seed, DRIVER_X0), params.sigma_0, dt, (n,))
    Xcheck = params.Xcheck0 + _brownian(_generator(seed, DRIVER_XCHECK), params.sigma_X, dt, (n_minor, n))
    return ScenarioPath(grid, S, forecast_sign * Xbar, forecast_sign * X0, forecast_sign * Xcheck)


def simulate_batch(params, grid, n_minor, seeds, forecast_sign: float = 1.0) -> ScenarioPath:
    """Stack the scenarios of the given seeds along a leading axis."""
    paths = [simulate(params, grid, n_minor, s, forecast_sign) for s in seeds]
    return ScenarioPath(
        grid,
        S=np.stack([p.S for p in paths]),
        Xbar=np.stack([p.Xbar for p in paths]),
        X0=np.stack([p.X0 for p in paths]),
        Xcheck=np.stack([p.Xcheck for p in paths]),
    )


def ensemble(params, grid, n_minor, n_sim, base_seed, forecast_sign: float = 1.0) -> Iterator[ScenarioPath]:
    """Yield ``n_sim`` independent scenarios, member ``k`` seeded ``base_seed ^ k``."""
    if n_sim < 1:
        raise DomainError("n_sim must be >= 1")
    for k in range(n_sim):
        yield simulate(params, grid, n_minor, scenario_seed(base_seed, k), forecast_sign)


def ensemble_batch(
    params, grid, n_minor, n_sim, base_seed, start: int = 0, forecast_sign: float = 1.0
) -> ScenarioPath:
    """Members ``start .. start + n_sim - 1`` of the ensemble as one batch."""
    if n_sim < 1:
        raise DomainError("n_sim must be >= 1")
    seeds = [scenario_seed(base_seed, k) for k in range(start, start + n_sim)]
    return simulate_batch(params, grid, n_minor, seeds, forecast_sign)


def deterministic_scenario(params: MarketParams, grid: TimeGrid, n_minor: int = 0, S=None) -> ScenarioPath:
    """Zero-noise scenario; an explicit deterministic ``S`` path becomes the drift."""
    n1 = grid.n_points
    if S is None:
        return ScenarioPath(
            grid,
            S=np.full(n1, params.S0),
            Xbar=np.full(n1, params.Xbar0),
            X0=np.full(n1, params.X0_0),
            Xcheck=np.full((n_minor, n1), params.Xcheck0),
        )
    S = np.asarray(S, dtype=float)
    return ScenarioPath(
        grid,
        S=S,
        Xbar=np.full(n1, params.Xbar0),
        X0=np.full(n1, params.X0_0),
        Xcheck=np.full((n_minor, n1), params.Xcheck0),
        S_drift=S.copy(),
    )
