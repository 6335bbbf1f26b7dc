"""Uniform time grid shared by every path-valued object."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, GridMismatchError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``0 = t_0 < ... < t_n = T``."""

    T: float = 24.0
    n_steps: int = 96
    times: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.T > 0:
            raise DomainError(f"horizon T must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise DomainError(f"n_steps must be an integer >= 2, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        times = np.linspace(0.0, self.T, self.n_steps + 1)
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.n_steps * factor)

    def check_same(self, other: "TimeGrid") -> None:
        if other.n_steps != self.n_steps or not np.isclose(other.T, self.T, rtol=0, atol=1e-12):
            raise GridMismatchError(
                f"grid mismatch: (T={self.T}, n={self.n_steps}) vs (T={other.T}, n={other.n_steps})"
            )
