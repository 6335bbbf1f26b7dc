"""Closed-form mean field equilibria of an intraday electricity market.

Subpackages are imported on demand; the usual entry points are
:mod:`intraday_mfg.stackelberg`, :mod:`intraday_mfg.homogeneous` and the
``intraday-mfg`` command line tool.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = [
    "kernels",
    "scenarios",
    "homogeneous",
    "stackelberg",
    "nplayer",
    "estimators",
    "oracle",
    "cli",
    "__version__",
]
