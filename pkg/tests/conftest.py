import sys

import numpy as np
import pytest

from intraday_mfg.grid import TimeGrid
from intraday_mfg.kernels import KernelTable, LiquiditySchedule, MarketParams


@pytest.fixture(scope="session")
def grid():
    return TimeGrid(24.0, 96)


@pytest.fixture(scope="session")
def params():
    """Reference constants with the symmetric impact split."""
    return MarketParams().with_weights(0.5, 0.5)


@pytest.fixture(scope="session")
def table(params, grid):
    return KernelTable.build(params, grid)


def constant_liquidity(beta=1.0, beta0=1.0, T=24.0):
    return LiquiditySchedule(0.0, beta, 0.0, beta0, T)


def assert_close(actual, expected, atol, rtol=0.0):
    np.testing.assert_allclose(actual, expected, atol=atol, rtol=rtol)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "SUMMARY", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
