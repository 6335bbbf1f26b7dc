"""Command line interface and configuration-driven experiment runner.

Configuration files are INI files whose sections mirror the package modules::

    [run]
    experiment = figure1
    output_dir = out

    [market]
    lam = 100

Every key can be overridden on the command line with ``--<section>-<key>``
(underscores become dashes), e.g. ``--market-lam 1e4``.  The environment
variable ``INTRADAY_MFG_OUTPUT_DIR`` overrides ``run.output_dir``; no other
configuration is read from the environment.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__
from .errors import DomainError, SingularMatrixError
from .estimators import (
    DEFAULT_BANDWIDTH,
    IncrementSeries,
    average_volatility,
    forecast_volatility,
    kernel_volatility,
    price_forecast_correlation,
    read_series,
    standard_volatility,
    write_volatility,
)
from .grid import TimeGrid
from .kernels import KernelTable, LiquiditySchedule, MarketParams
from .scenarios import ScenarioPath, ensemble_batch, simulate, write_columns

OUTPUT_ENV = "INTRADAY_MFG_OUTPUT_DIR"
EXPERIMENTS = ("figure1", "figure2_left", "figure3", "epsnash_scaling", "oracle_suite", "custom")
STEPS = ("simulate", "equilibrium", "homogeneous", "epsnash", "estimate", "oracle")
CHUNK = 2000


class ConfigError(ValueError):
    """A configuration key is unknown or holds an invalid value."""


# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------


def _str_list(text: str) -> List[str]:
    return [s.strip() for s in str(text).split(",") if s.strip()]


def _int_list(text: str) -> List[int]:
    return [int(s) for s in _str_list(text)]


def _weight_list(text: str) -> List[tuple]:
    out = []
    for item in _str_list(text):
        a0, a = item.split(":")
        out.append((float(a0), float(a)))
    return out


def _bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_TABLE = MarketParams()
_LIQ = LiquiditySchedule()

# section -> key -> (parser, default text)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "run": {
        "experiment": (str, "custom"),
        "steps": (_str_list, ""),
        "output_dir": (str, "output"),
        "threads": (int, "0"),
    },
    "market": {
        **{k: (float, repr(getattr(_TABLE, k))) for k in (
            "a", "a0", "lam", "lam0", "S0", "sigma_S", "Xbar0", "sigma_bar", "sigma_0", "sigma_X", "X0_0", "Xcheck0"
        )},
        **{k: (float, repr(getattr(_LIQ, k))) for k in (
            "alpha_slope", "alpha_intercept", "alpha0_slope", "alpha0_intercept", "T"
        )},
    },
    "grid": {"n_steps": (int, "96")},
    "scenarios": {
        "n_minor": (int, "0"),
        "n_sim": (int, "1000"),
        "seed": (int, "0"),
        "forecast_sign": (float, "1.0"),
    },
    "stackelberg": {"a0": (float, "0.5"), "a": (float, "0.5")},
    "homogeneous": {"a": (float, "1.0")},
    "estimators": {
        "h": (float, repr(DEFAULT_BANDWIDTH)),
        "window": (float, "0.25"),
        "average": (str, "rms"),
        "volatility_n_sim": (int, "1000"),
        "correlation_n_sim": (int, "50000"),
        "weight_presets": (_weight_list, "0.9:0.1, 0.5:0.5, 0.0:1.0"),
        "fixed_forecast": (_bool, "true"),
        "forecast_seed": (int, "0"),
    },
    "nplayer": {
        "Ns": (_int_list, "4, 16, 64, 256"),
        "n_sim": (int, "10000"),
        "agent": (int, "0"),
        "chunk": (int, "500"),
    },
    "oracle": {"n_sim": (int, "10000"), "n_test_processes": (int, "20"), "seed": (int, "0")},
}


@dataclass
class Config:
    """Resolved configuration: raw text values plus their parsed form."""

    raw: Dict[str, Dict[str, str]]
    values: Dict[str, Dict[str, object]] = field(default_factory=dict)

    def __getitem__(self, dotted: str):
        section, key = dotted.split(".")
        return self.values[section][key]

    # derived objects -----------------------------------------------------
    def market(self, **weights) -> MarketParams:
        m = dict(self.values["market"])
        liq = LiquiditySchedule(**{k: m.pop(k) for k in ("alpha_slope", "alpha_intercept", "alpha0_slope", "alpha0_intercept", "T")})
        return MarketParams(liquidity=liq, **m).replace(**weights) if weights else MarketParams(liquidity=liq, **m)

    def grid(self) -> TimeGrid:
        return TimeGrid(self.values["market"]["T"], self.values["grid"]["n_steps"])

    def canonical(self) -> str:
        """Sorted ``section.key = value`` lines, excluding the output directory."""
        lines = []
        for section in sorted(self.raw):
            for key in sorted(self.raw[section]):
                if (section, key) != ("run", "output_dir"):
                    lines.append(f"{section}.{key} = {self.raw[section][key]}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _parse(raw):
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parser, _) in keys.items():
            text = raw[section][key]
            try:
                values[section][key] = parser(text)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{section}.{key}: invalid value {text!r} ({exc})") from None
    return values


def load_config(path=None, overrides: Optional[Dict[str, str]] = None, env=None) -> Config:
    """Defaults, then the file, then ``overrides`` (``"section.key" -> text``), then the env."""
    raw = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in cp.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                raw[section][key] = value.strip()
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {dotted}")
        raw[section][key] = str(value)
    env = os.environ if env is None else env
    if env.get(OUTPUT_ENV):
        raw["run"]["output_dir"] = env[OUTPUT_ENV]
    return Config(raw, _parse(raw))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" or "warning"
    key: str
    message: str

    def __str__(self):
        return f"{self.level}: {self.key}: {self.message}"


def validate(config: Config) -> List[Diagnostic]:
    """Admissibility checks of every module, without running anything."""
    out: List[Diagnostic] = []

    def err(key, msg):
        out.append(Diagnostic("error", key, msg))

    def warn(key, msg):
        out.append(Diagnostic("warning", key, msg))

    v = config.values
    m = v["market"]
    for key in ("a", "a0", "lam", "lam0", "sigma_S", "sigma_bar", "sigma_0", "sigma_X"):
        if not (np.isfinite(m[key]) and m[key] >= 0):
            err(f"market.{key}", "must be finite and >= 0")
    for section in ("stackelberg", "homogeneous"):
        for key, value in v[section].items():
            if not value >= 0:
                err(f"{section}.{key}", "impact weight must be >= 0")
    T = m["T"]
    if not T > 0:
        err("market.T", "horizon must be positive")
    for name in ("alpha", "alpha0"):
        slope, icpt = m[f"{name}_slope"], m[f"{name}_intercept"]
        if icpt < 0:
            err(f"market.{name}_intercept", "must be >= 0 (liquidity coefficient at delivery)")
        elif icpt == 0:
            warn(
                f"market.{name}_intercept",
                "zero trading cost at delivery is the degenerate limit where the equilibrium is not unique; solvers refuse it",
            )
        if T > 0 and slope * T + icpt <= 0:
            err(f"market.{name}_slope", f"{name}(0) = slope*T + intercept must be positive")
        if slope < 0:
            warn(f"market.{name}_slope", "negative slope: liquidity cost increases towards delivery")
    if v["grid"]["n_steps"] < 2:
        err("grid.n_steps", "need at least 2 steps")
    sc = v["scenarios"]
    if sc["n_minor"] < 0:
        err("scenarios.n_minor", "must be >= 0")
    if sc["n_sim"] < 1:
        err("scenarios.n_sim", "must be >= 1")
    if sc["forecast_sign"] == 0:
        err("scenarios.forecast_sign", "must be nonzero")
    est = v["estimators"]
    if not est["h"] > 0:
        err("estimators.h", "bandwidth must be positive")
    if T > 0 and v["grid"]["n_steps"] >= 2:
        dt = T / v["grid"]["n_steps"]
        ratio = est["window"] / dt
        if not (est["window"] > 0 and abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1):
            err("estimators.window", f"must be a positive multiple of the grid step {dt}")
    if est["average"] not in ("rms", "mean"):
        err("estimators.average", "must be 'rms' or 'mean'")
    if est["volatility_n_sim"] < 1:
        err("estimators.volatility_n_sim", "must be >= 1")
    if est["correlation_n_sim"] < 2:
        err("estimators.correlation_n_sim", "must be >= 2")
    if not est["weight_presets"]:
        err("estimators.weight_presets", "need at least one a0:a pair")
    for a0, a in est["weight_presets"]:
        if a0 < 0 or a < 0:
            err("estimators.weight_presets", f"negative weight in {a0}:{a}")
    npl = v["nplayer"]
    if not npl["Ns"] or min(npl["Ns"]) < 1:
        err("nplayer.Ns", "population sizes must be >= 1")
    elif not 0 <= npl["agent"] < min(npl["Ns"]):
        err("nplayer.agent", "must index an agent of the smallest population")
    if npl["n_sim"] < 2:
        err("nplayer.n_sim", "must be >= 2")
    if npl["chunk"] < 1:
        err("nplayer.chunk", "must be >= 1")
    if v["oracle"]["n_sim"] < 2:
        err("oracle.n_sim", "must be >= 2")
    if v["oracle"]["n_test_processes"] < 1:
        err("oracle.n_test_processes", "must be >= 1")
    run = v["run"]
    if run["experiment"] not in EXPERIMENTS:
        err("run.experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    for step in run["steps"]:
        if step not in STEPS:
            err("run.steps", f"unknown step {step!r}; choose from {', '.join(STEPS)}")
    if run["threads"] < 0:
        err("run.threads", "must be >= 0 (0 = one per CPU)")
    return out


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


class Artifacts:
    """Collects output files (name -> text or bytes) in creation order."""

    def __init__(self):
        self.files: Dict[str, object] = {}
        self.notes: Dict[str, str] = {}

    def add(self, name: str, content):
        self.files[name] = content

    def write(self, directory: Path):
        directory.mkdir(parents=True, exist_ok=True)
        for name, content in self.files.items():
            mode = "wb" if isinstance(content, bytes) else "w"
            with open(directory / name, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
                fh.write(content)


def _threads(config: Config) -> int:
    n = config["run.threads"]
    return n if n > 0 else (os.cpu_count() or 1)


def _chunked(fn: Callable[[int, int], object], n_total: int, threads: int, chunk: int = CHUNK):
    """Evaluate ``fn(lo, size)`` over consecutive chunks; results in chunk order."""
    spans = [(lo, min(chunk, n_total - lo)) for lo in range(0, n_total, chunk)]
    if threads <= 1 or len(spans) == 1:
        return [fn(lo, size) for lo, size in spans]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: fn(*s), spans))


def _svg(draw: Callable) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "intraday-mfg", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7, 4))
        draw(ax)
        ax.set_xlabel("t (h)")
        ax.legend(fontsize=8)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def figure1(config: Config) -> Artifacts:
    """Major position, Stackelberg mean field and homogeneous mean field on one scenario."""
    from . import homogeneous, stackelberg

    grid = config.grid()
    p_st = config.market(a0=config["stackelberg.a0"], a=config["stackelberg.a"])
    p_h = config.market(a0=0.0, a=config["homogeneous.a"])
    scen = simulate(p_st, grid, 0, config["scenarios.seed"], config["scenarios.forecast_sign"])
    eq = stackelberg.solve(scen, p_st)
    hom = homogeneous.equilibrium(scen, p_h, agent_index=None)
    art = Artifacts()
    cols = [grid.times, eq.phi0, eq.phibar, hom.phi_bar, scen.X0, scen.Xbar]
    art.add("positions.csv", write_columns(["t", "phi0", "phibar_stackelberg", "phibar_homogeneous", "X0", "Xbar"], cols))

    def draw(ax):
        ax.plot(grid.times, eq.phi0, label="major position (Stackelberg)")
        ax.plot(grid.times, eq.phibar, label="mean field (Stackelberg)")
        ax.plot(grid.times, hom.phi_bar, "--", label="mean field (homogeneous)")
        ax.set_ylabel("MWh")

    art.add("positions.svg", _svg(draw))
    return art


def volatility_curves(config: Config) -> Dict[tuple, tuple]:
    """Ensemble-averaged kernel volatility of the equilibrium price per weight preset.

    Returns ``{(a0, a): (t, sigma_hat)}``.  With ``fixed_forecast`` all
    members share the forecast paths of ``forecast_seed``; only the
    fundamental price varies.
    """
    from . import stackelberg

    grid = config.grid()
    n_sim = config["estimators.volatility_n_sim"]
    sign = config["scenarios.forecast_sign"]
    seed = config["scenarios.seed"]
    curves = {}
    for a0, a in config["estimators.weight_presets"]:
        params = config.market(a0=a0, a=a)
        table = KernelTable.build(params, grid)
        base = simulate(params, grid, 0, config["estimators.forecast_seed"], sign)

        def chunk(lo, size, params=params, table=table, base=base):
            scen = ensemble_batch(params, grid, 0, size, seed, start=lo, forecast_sign=sign)
            if config["estimators.fixed_forecast"]:
                shape = scen.S.shape
                scen = ScenarioPath(
                    grid,
                    scen.S,
                    np.broadcast_to(base.Xbar, shape).copy(),
                    np.broadcast_to(base.X0, shape).copy(),
                    np.zeros((size, 0, grid.n_points)),
                )
            eq = stackelberg.solve(scen, params, table)
            return kernel_volatility(eq.price, grid, config["estimators.h"])

        sig = np.concatenate(_chunked(chunk, n_sim, _threads(config)))
        curves[(a0, a)] = (grid.times, average_volatility(sig, how=config["estimators.average"]))
    return curves


def _preset_name(a0, a) -> str:
    return f"a0-{a0:g}_a-{a:g}"


def figure2_left(config: Config) -> Artifacts:
    curves = volatility_curves(config)
    art = Artifacts()
    for (a0, a), (t, s) in curves.items():
        art.add(f"volatility_{_preset_name(a0, a)}.csv", write_volatility(t, s))

    def draw(ax):
        for (a0, a), (t, s) in curves.items():
            ax.plot(t, s, label=f"a0 = {a0:g}, a = {a:g}")
        ax.set_ylabel("volatility (EUR/MWh/sqrt(h))")

    art.add("volatility.svg", _svg(draw))
    return art


def correlation_paths(config: Config):
    """Major and total forecast/price increment correlations at ``stackelberg`` weights."""
    from . import stackelberg

    grid = config.grid()
    params = config.market(a0=config["stackelberg.a0"], a=config["stackelberg.a"])
    table = KernelTable.build(params, grid)
    sign, seed = config["scenarios.forecast_sign"], config["scenarios.seed"]

    def chunk(lo, size):
        scen = ensemble_batch(params, grid, 0, size, seed, start=lo, forecast_sign=sign)
        eq = stackelberg.solve(scen, params, table)
        return eq.price, scen.X0, scen.X0 + scen.Xbar

    parts = _chunked(chunk, config["estimators.correlation_n_sim"], _threads(config))
    P, X0, Xtot = (np.concatenate([p[i] for p in parts]) for i in range(3))
    window = config["estimators.window"]
    return (
        price_forecast_correlation(P, X0, grid, window),
        price_forecast_correlation(P, Xtot, grid, window),
    )


def figure3(config: Config) -> Artifacts:
    major, total = correlation_paths(config)
    art = Artifacts()
    art.add("correlation_major.csv", major.to_csv())
    art.add("correlation_total.csv", total.to_csv())

    def draw(ax):
        for c, label in ((major, "major forecast"), (total, "total forecast")):
            ax.plot(c.t, c.rho, label=label)
            ax.fill_between(c.t, c.ci_lo, c.ci_hi, alpha=0.3)
        ax.set_ylabel("correlation")

    art.add("correlation.svg", _svg(draw))
    return art


def epsnash_scaling(config: Config) -> Artifacts:
    from .nplayer import epsilon_nash_study

    rep = epsilon_nash_study(
        config.market(a0=config["stackelberg.a0"], a=config["stackelberg.a"]),
        config.grid(),
        Ns=config["nplayer.Ns"],
        n_sim=config["nplayer.n_sim"],
        base_seed=config["scenarios.seed"],
        agent=config["nplayer.agent"],
        chunk=config["nplayer.chunk"],
    )
    art = Artifacts()
    art.add("epsnash.csv", rep.to_csv())
    lines = [f"C = {rep.C!r}"] + [f"slope[{k}] = {v!r}" for k, v in rep.slopes.items()]
    lines.append(f"verdict = {'PASS' if rep.passed else 'FAIL'}")
    art.add("epsnash.txt", "\n".join(lines) + "\n")
    art.notes["epsnash_runtime_s"] = f"{rep.runtime:.1f}"
    ids = sorted({r.deviation_id for r in rep.rows})

    def draw(ax):
        for d in ids:
            rows = [r for r in rep.rows if r.deviation_id == d]
            ax.errorbar([r.N for r in rows], [abs(r.gain) for r in rows], yerr=[3 * r.se for r in rows], marker="o", label=d)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_ylabel("|gain|")

    art.add("epsnash.svg", _svg(draw).replace("t (h)", "N"))
    return art


def oracle_suite(config: Config) -> Artifacts:
    """Deterministic shooting oracle, martingale residuals and first-order conditions."""
    from dataclasses import replace

    from . import oracle, stackelberg
    from .scenarios import deterministic_scenario

    grid = config.grid()
    params = config.market(a0=config["stackelberg.a0"], a=config["stackelberg.a"])
    art = Artifacts()
    det = stackelberg.solve(deterministic_scenario(params, grid), params)
    bvp = oracle.deterministic_bvp(params, params.S0, grid=grid)
    gap = float(np.max(np.abs(det.Xi - bvp.Xi)))
    art.add("bvp.csv", oracle.bvp_to_csv(bvp))
    n_sim, seed = config["oracle.n_sim"], config["oracle.seed"]
    table = KernelTable.build(params, grid)
    scen = ensemble_batch(params, grid, 1, n_sim, seed)
    eq = stackelberg.solve(scen, params, table)
    mart = oracle.martingale_residual_test({"M0": eq.M0, "M": eq.M, "Ybar": eq.Ybar}, scen)
    k = config["oracle.n_test_processes"]
    phi_i = stackelberg.minor_strategy(scen, params, eq, 0, table)
    foc = oracle.foc_test(eq, scen, params, k, seed=seed, minor_paths=phi_i, table=table)
    Xi = eq.Xi.copy()
    Xi[..., 2] += 1.0
    bad = oracle.foc_test(replace(eq, Xi=Xi), scen, params, k, seed=seed, table=table, major=False)
    text = [
        f"deterministic oracle sup gap = {gap:.3e}",
        mart.text(),
        foc.text(),
        f"perturbed mean field detected: {'yes' if not bad.passed else 'no'}",
    ]
    art.add("oracle_report.txt", "\n".join(text) + "\n")
    art.add("martingale.csv", mart.to_csv())
    art.add("foc.csv", foc.to_csv())
    return art


def _custom_step(step: str, config: Config) -> Artifacts:
    from dataclasses import replace

    from . import homogeneous, stackelberg

    grid = config.grid()
    sc = config.values["scenarios"]
    art = Artifacts()
    if step in ("simulate", "equilibrium", "homogeneous"):
        params = config.market(a0=config["stackelberg.a0"], a=config["stackelberg.a"])
        scen = simulate(params, grid, sc["n_minor"], sc["seed"], sc["forecast_sign"])
        if step == "simulate":
            art.add("scenario.csv", scen.to_csv())
        elif step == "equilibrium":
            eq = stackelberg.solve(scen, params)
            if scen.n_minor:
                phi = [stackelberg.minor_strategy(scen, params, eq, i) for i in range(scen.n_minor)]
                eq = replace(eq, phi_i=np.array(phi))
            art.add("equilibrium.csv", eq.to_csv())
        else:
            p_h = config.market(a0=0.0, a=config["homogeneous.a"])
            art.add("homogeneous.csv", homogeneous.equilibrium(scen, p_h, agent_index=0 if scen.n_minor else None).to_csv())
    elif step == "estimate":
        figure2 = figure2_left(config)
        art.files.update({k: v for k, v in figure2.files.items() if k.endswith(".csv")})
    elif step == "epsnash":
        art = epsnash_scaling(config)
    elif step == "oracle":
        art = oracle_suite(config)
    return art


RUNNERS = {
    "figure1": figure1,
    "figure2_left": figure2_left,
    "figure3": figure3,
    "epsnash_scaling": epsnash_scaling,
    "oracle_suite": oracle_suite,
}


def _sha(content) -> str:
    data = content if isinstance(content, bytes) else content.encode()
    return hashlib.sha256(data).hexdigest()


def manifest_text(config: Config, art: Artifacts) -> str:
    lines = [
        f"library_version = {__version__}",
        f"experiment = {config['run.experiment']}",
        f"seed = {config['scenarios.seed']}",
        f"config_sha256 = {config.digest()}",
    ]
    for name, content in art.files.items():
        lines.append(f"file.{name} = {_sha(content)}")
    lines += [f"config.{line}" for line in config.canonical().splitlines()]
    return "\n".join(lines) + "\n"


def run(config: Config) -> Path:
    """Execute the configured experiment and write its files plus ``manifest.txt``."""
    problems = [d for d in validate(config) if d.level == "error"]
    if problems:
        raise ConfigError("; ".join(f"{d.key}: {d.message}" for d in problems))
    kind = config["run.experiment"]
    if kind == "custom":
        art = Artifacts()
        for step in config["run.steps"]:
            sub = _custom_step(step, config)
            art.files.update(sub.files)
            art.notes.update(sub.notes)
    else:
        art = RUNNERS[kind](config)
    out = Path(config["run.output_dir"])
    art.write(out)
    with open(out / "manifest.txt", "w", newline="") as fh:
        fh.write(manifest_text(config, art))
    return out


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _flag(section: str, key: str) -> str:
    return f"--{section}-{key}".replace("_", "-")


def _add_overrides(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("configuration overrides")
    for section, keys in SCHEMA.items():
        for key in keys:
            group.add_argument(_flag(section, key), dest=f"cfg:{section}.{key}", metavar="VALUE", default=None)


def _overrides(ns) -> Dict[str, str]:
    return {k[4:]: v for k, v in vars(ns).items() if k.startswith("cfg:") and v is not None}


def _emit(text: str, out: Optional[str]):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intraday-mfg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, config_positional=False):
        p = sub.add_parser(name, help=help_text)
        if config_positional:
            p.add_argument("config", help="INI configuration file")
        else:
            p.add_argument("--config", default=None, help="INI configuration file")
        _add_overrides(p)
        return p

    for name, text in (
        ("simulate", "simulate one scenario and print its paths as CSV"),
        ("equilibrium", "Stackelberg equilibrium on one simulated scenario"),
        ("homogeneous", "homogeneous equilibrium on one simulated scenario"),
    ):
        command(name, text).add_argument("--out", default=None, help="output CSV (default stdout)")
    command("epsnash", "epsilon-Nash scaling study")
    p = command("estimate", "volatility estimators on an external t,value series")
    p.add_argument("--input", required=True, help="CSV with columns t,value")
    p.add_argument("--kind", choices=("kernel", "forecast"), default="kernel")
    p.add_argument("--out", default=None)
    command("oracle", "independent verification suite")
    command("run", "run the experiment described by a configuration file", config_positional=True)
    command("validate", "check a configuration without running it", config_positional=True)
    return parser


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        config = load_config(ns.config, _overrides(ns))
        if ns.command == "validate":
            diags = validate(config)
            for d in diags:
                print(d)
            if not diags:
                print("configuration is clean")
            return 1 if any(d.level == "error" for d in diags) else 0
        problems = [d for d in validate(config) if d.level == "error"]
        if problems:
            raise ConfigError("; ".join(f"{d.key}: {d.message}" for d in problems))
        if ns.command == "run":
            start = time.perf_counter()
            out = run(config)
            print(f"wrote {out} in {time.perf_counter() - start:.1f} s")
        elif ns.command in ("simulate", "equilibrium", "homogeneous"):
            art = _custom_step(ns.command, config)
            _emit(next(iter(art.files.values())), ns.out)
        elif ns.command == "estimate":
            t, v = read_series(ns.input)
            if ns.kind == "kernel":
                _emit(write_volatility(t, kernel_volatility(v, t, config["estimators.h"])), ns.out)
            else:
                series = IncrementSeries.from_path(v, float(np.mean(np.diff(t))))
                _emit(
                    f"forecast_volatility = {forecast_volatility(series)!r}\n"
                    f"standard_volatility = {standard_volatility(series)!r}\n",
                    ns.out,
                )
        else:
            kind = {"epsnash": "epsnash_scaling", "oracle": "oracle_suite"}[ns.command]
            config.raw["run"]["experiment"] = kind
            config.values["run"]["experiment"] = kind
            out = run(config)
            print(f"wrote {out}")
            if ns.command == "oracle":
                sys.stdout.write((out / "oracle_report.txt").read_text())
    except (ConfigError, DomainError, SingularMatrixError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
