"""Command-line experiment runner.

Modes: ``acopf`` and ``fpacopf`` write a dispatch solution, ``rates`` writes the per-line
rate report for a dispatch, ``kmc`` runs paired cascade batches and ``validate`` runs the
derivative, determinant and first-passage checks. Settings come from an optional JSON
config file; command-line flags override it. Every output embeds the config hash and
seed, and only the separate timing files vary between identical reruns.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import itertools
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import failrate, fpacopf, kmc, nlp
from .energy import (
    DispatchPoint,
    EnergyModel,
    NoConvergence,
    UnstableEquilibrium,
    energy_gradient,
    energy_hessian,
    find_equilibrium,
)
from .netmodel import DEFAULT_ITRIP_FACTOR, CaseParseError, CaseValidationError, Network, load_case

MODES = ("acopf", "fpacopf", "rates", "kmc", "validate")
SWEEP_KEYS = ("itrip_factor", "load_scale", "lambda_lim", "tau")


class ConfigError(ValueError):
    pass


class SolveError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    case: str = "case118"
    mode: str = "acopf"
    lambda_lim: float | None = None
    epsilon: float | None = None
    horizon: float = kmc.DEFAULT_HORIZON
    tau: float = 1e-4
    itrip_factor: float = DEFAULT_ITRIP_FACTOR
    load_scale: float = 1.0
    runs: int = 100
    seed: int = 0
    out: str = "out"
    threads: int = 1
    dispatch: list[str] = field(default_factory=list)
    tol: float | None = None
    max_iter: int | None = None
    max_rounds: int = 20
    include_initial: bool = False
    sweep: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.mode == "fpacopf" and (self.lambda_lim is None) == (self.epsilon is None):
            raise ConfigError("fpacopf needs exactly one of --lambda-lim or --epsilon (with --horizon)")
        if self.lambda_lim is not None and not self.lambda_lim > 0:
            raise ConfigError("--lambda-lim must be positive")
        if self.epsilon is not None and not 0 < self.epsilon < 1:
            raise ConfigError("--epsilon must lie in (0, 1)")
        for name in ("horizon", "tau", "itrip_factor", "load_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.runs < 1 or self.threads < 1:
            raise ConfigError("--runs and --threads must be at least 1")
        for k, v in self.sweep.items():
            if k not in SWEEP_KEYS or not isinstance(v, list) or not v:
                raise ConfigError(f"sweep entry {k!r} must be one of {SWEEP_KEYS} with a non-empty list")

    def rate_limit(self) -> float | None:
        if self.lambda_lim is not None:
            return self.lambda_lim
        if self.epsilon is not None:
            return failrate.rate_limit_from_probability(self.epsilon, self.horizon)
        return None

    def digest(self) -> str:
        """Hash of every setting that influences results (not the output path or thread count)."""
        d = dataclasses.asdict(self)
        for k in ("out", "threads"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def header(self) -> dict:
        return {"config_hash": self.digest(), "seed": self.seed, "mode": self.mode, "case": self.case}


FLAG_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"sweep"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cascadeopf", description="Failure-probability constrained ACOPF and cascade simulation")
    p.add_argument("mode_pos", nargs="?", choices=MODES, metavar="MODE", help="same as --mode")
    p.add_argument("--config", help="JSON file with ExperimentConfig fields; flags override it")
    p.add_argument("--case", help="bundled case name or MATPOWER file")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--lambda-lim", dest="lambda_lim", type=float, help="failure-rate limit (1/s)")
    p.add_argument("--epsilon", type=float, help="failure probability over --horizon, instead of --lambda-lim")
    p.add_argument("--horizon", type=float, help="time horizon in seconds")
    p.add_argument("--tau", type=float, help="noise level")
    p.add_argument("--itrip-factor", dest="itrip_factor", type=float, help="trip current relative to the thermal limit")
    p.add_argument("--load-scale", dest="load_scale", type=float, help="demand multiplier")
    p.add_argument("--runs", type=int, help="cascade runs per dispatch")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker processes for cascade batches")
    p.add_argument("--dispatch", action="append", help="solution file to use as dispatch (repeatable)")
    p.add_argument("--tol", type=float, help="NLP tolerance")
    p.add_argument("--max-iter", dest="max_iter", type=int, help="NLP iteration cap")
    p.add_argument("--max-rounds", dest="max_rounds", type=int, help="constraint-generation round cap")
    p.add_argument("--include-initial", dest="include_initial", action="store_const", const=True,
                   help="count the initial outages and their shed in cascade statistics")
    return p


def make_config(args: argparse.Namespace) -> ExperimentConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(base) - {f.name for f in dataclasses.fields(ExperimentConfig)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for k in FLAG_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            base[k] = v
    if args.mode_pos and args.mode is None:
        base["mode"] = args.mode_pos
    try:
        cfg = ExperimentConfig(**base)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def sweep_cells(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """One config per grid cell, named after its swept values; a single unnamed cell without a sweep."""
    if not cfg.sweep:
        return [("", cfg)]
    keys = sorted(cfg.sweep)
    cells = []
    for values in itertools.product(*(cfg.sweep[k] for k in keys)):
        c = dataclasses.replace(cfg, sweep={}, **dict(zip(keys, values)))
        c.validate()
        cells.append((",".join(f"{k}={v}" for k, v in zip(keys, values)), c))
    return cells


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _network(cfg: ExperimentConfig) -> Network:
    return load_case(cfg.case, itrip_factor=cfg.itrip_factor, load_scale=cfg.load_scale)


def _options(cfg: ExperimentConfig) -> nlp.SolverOptions:
    kw = {}
    if cfg.tol is not None:
        kw["tol"] = cfg.tol
    if cfg.max_iter is not None:
        kw["max_iter"] = cfg.max_iter
    return fpacopf.default_options(**kw)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _header_lines(cfg: ExperimentConfig) -> list[str]:
    return [f"{k}: {v}" for k, v in cfg.header().items()]


def read_dispatch(network: Network, path) -> tuple[np.ndarray, DispatchPoint]:
    """Equilibrium and dispatch from a solution file written by the acopf/fpacopf modes."""
    doc = json.loads(Path(path).read_text())
    sol = doc.get("solution", doc)
    gens = sol["generators"]
    if len(gens) != network.n_gen or len(sol["buses"]) != network.n_bus:
        raise ConfigError(f"dispatch file {path} does not match case {network.name}")
    V = np.array([b["v"] for b in sol["buses"]])
    th = np.array([b["theta"] for b in sol["buses"]])
    y = DispatchPoint(V[network.gen_buses], float(th[network.slack]),
                      np.array([g["p"] for g in gens]), np.array([g["q"] for g in gens]))
    idx = network.index
    x0 = np.concatenate([V[idx.load_buses], th[idx.angle_buses]])
    return find_equilibrium(network, y, x0), y


def _solve(cfg: ExperimentConfig, network: Network, lam: float | None) -> fpacopf.DispatchSolution:
    if lam is None:
        sol = fpacopf.solve_acopf(network, _options(cfg), tau=cfg.tau)
    else:
        sol = fpacopf.solve_fpacopf(network, lam, tau=cfg.tau, options=_options(cfg), max_rounds=cfg.max_rounds)
    if sol.status != nlp.OPTIMAL:
        where = f" in round {sol.failed_round}" if sol.failed_round is not None else ""
        raise SolveError(f"solver finished with status {sol.status}{where}")
    return sol


def _dispatches(cfg: ExperimentConfig, network: Network) -> dict:
    if cfg.dispatch:
        return {Path(p).stem: read_dispatch(network, p) for p in cfg.dispatch}
    out = {}
    base = _solve(cfg, network, None)
    out["n0"] = (base.x, base.y)
    lam = cfg.rate_limit()
    if lam is not None:
        fp = _solve(cfg, network, lam)
        out[f"fp_{lam:g}"] = (fp.x, fp.y)
    return out


# ---------------------------------------------------------------------------
# modes
# ---------------------------------------------------------------------------


def run_opf(cfg: ExperimentConfig, out: Path) -> dict:
    network = _network(cfg)
    lam = cfg.rate_limit() if cfg.mode == "fpacopf" else None
    sol = _solve(cfg, network, lam)
    header = cfg.header() | {"lambda_lim": lam}
    out.mkdir(parents=True, exist_ok=True)
    fpacopf.write_solution(sol, out / "solution.json", header)
    fpacopf.write_timing(sol, out / "timing.json")
    if cfg.mode == "fpacopf":
        rounds = [{k: v for k, v in r.__dict__.items() if k not in ("solve_time", "screen_time")} for r in sol.rounds]
        _write(out / "rounds.json", json.dumps({"header": header, "rounds": rounds}, indent=2, default=float))
    return {"objective": sol.objective, "max_rate": sol.max_rate, "rounds": len(sol.rounds), "status": sol.status}


def run_rates(cfg: ExperimentConfig, out: Path) -> dict:
    network = _network(cfg)
    if cfg.dispatch:
        x, y = read_dispatch(network, cfg.dispatch[0])
    else:
        sol = _solve(cfg, network, None)
        x, y = sol.x, sol.y
    table = failrate.failure_rates(EnergyModel(network, tau=cfg.tau), x, y)
    _write(out / "rates.csv", failrate.write_rate_report(network, table, _header_lines(cfg)))
    unresolved = [int(network.lines[table.lines[k]].label) for k, s in enumerate(table.status) if s in ("no-root", "degenerate")]
    if unresolved:
        print(f"warning: no failure point found for lines {unresolved}", file=sys.stderr)
    return {"max_rate": table.max_rate(), "lines": len(table)}


def run_kmc(cfg: ExperimentConfig, out: Path) -> dict:
    network = _network(cfg)
    dispatches = _dispatches(cfg, network)
    opts = kmc.CascadeOptions(horizon=cfg.horizon, tau=cfg.tau, include_initial=cfg.include_initial)
    res = kmc.run_batch(network, dispatches, cfg.runs, cfg.seed, opts, workers=cfg.threads)
    hdr = _header_lines(cfg)
    for name, (traces, st) in res.items():
        _write(out / f"{name}_traces.csv", kmc.write_traces(traces, network, hdr))
        _write(out / f"{name}_failed.dat", kmc.survival_data(st, "failed"))
        _write(out / f"{name}_shed.dat", kmc.survival_data(st, "shed"))
        _write(out / f"{name}_timeline.dat", kmc.timeline_data(st))
    _write(out / "stats.csv", kmc.write_stats({k: v[1] for k, v in res.items()}, hdr))
    _write(out / "plots.gp", kmc.gnuplot_script(list(res)))
    return {name: {"mean_failed": st.mean_failed, "mean_shed": st.mean_shed} for name, (_, st) in res.items()}


def _fd_check(f, g, x, h=1e-6) -> float:
    """Relative error of an analytic derivative g against central differences of f."""
    ref = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(len(x))]).T
    an = g(x)
    return float(np.max(np.abs(an - ref)) / max(1.0, np.max(np.abs(ref))))


def derivative_check(network: Network, y: DispatchPoint, x_bar: np.ndarray, rng: np.random.Generator,
                     n_states: int = 20, scale: float = 0.02) -> float:
    """Worst relative error of energy and Theta derivatives over random states near x_bar."""
    worst = 0.0
    lines = np.flatnonzero(network.failure_set)
    nv = network.index.n_v
    for _ in range(n_states):
        x = x_bar + scale * rng.standard_normal(len(x_bar))
        x[:nv] = np.maximum(x[:nv], 0.5)
        worst = max(worst, _fd_check(lambda z: energy_gradient(network, z, y), lambda z: energy_hessian(network, z, y), x))
        l = int(rng.choice(lines))
        worst = max(worst, _fd_check(lambda z: np.array(failrate.theta(network, l, z, y)),
                                     lambda z: failrate.theta_gradient(network, l, z, y), x))
        worst = max(worst, _fd_check(lambda z: failrate.theta_gradient(network, l, z, y),
                                     lambda z: failrate.theta_hessian(network, l, z, y), x))
    return worst


def determinant_check(model: EnergyModel, x: np.ndarray, y: DispatchPoint) -> float:
    """Worst relative difference between the closed-form and the dense-determinant log rates."""
    table = failrate.failure_rates(model, x, y)
    worst = 0.0
    for k, l in enumerate(table.lines):
        if table.status[k] != "ok":
            continue
        xs = failrate.full_failure_point(failrate.EquilibriumContext.build(model.network, x, y), table, k)
        dense = failrate.dense_log_rate(model, int(l), x, y, xs, table.mu[k])
        worst = max(worst, abs(dense["log_lam"] - table.log_lam[k]) / max(1.0, abs(table.log_lam[k])))
    return worst


SDE_CASE = "case3_load"
SDE_TAU = 6e-3
SDE_DT = 5e-5


def sde_check(rng: np.random.Generator, n_paths: int = 200) -> dict:
    """Euler-Maruyama mean first-passage time against 1/lambda on the three-bus loop."""
    net = load_case(SDE_CASE)
    y = sde_dispatch()
    x = find_equilibrium(net, y)
    m = EnergyModel(net, tau=SDE_TAU)
    table = failrate.failure_rates(m, x, y)
    k = int(np.argmax(table.lam))
    line = int(table.lines[k])
    fp = kmc.euler_maruyama_first_passage(m, y, line, x, SDE_DT, n_paths, rng, max_steps=400_000)
    return {"line": line, "inverse_rate": 1.0 / table.lam[k], "mean_passage": fp.mean,
            "ratio": fp.mean * table.lam[k], "censored": fp.n_censored}


def sde_dispatch() -> DispatchPoint:
    return DispatchPoint(np.array([1.05, 1.03]), 0.0, np.array([1.0, 1.0]), np.array([0.0, 0.0]))


def run_validate(cfg: ExperimentConfig, out: Path) -> dict:
    rng = np.random.default_rng(cfg.seed)
    report: dict = {"header": cfg.header()}
    for case in ("case9", "case30", cfg.case):
        if case in report:
            continue
        net = load_case(case, itrip_factor=cfg.itrip_factor, load_scale=cfg.load_scale)
        sol = fpacopf.solve_acopf(net, _options(cfg), tau=cfg.tau, with_rates=False)
        entry = {"derivative_rel_error": derivative_check(net, sol.y, sol.x, rng)}
        if net.index.d_static <= 30:
            entry["determinant_rel_error"] = determinant_check(EnergyModel(net, tau=cfg.tau), sol.x, sol.y)
        report[case] = entry
    report["sde"] = sde_check(rng)
    _write(out / "validate.json", json.dumps(report, indent=2, default=float))
    return report


RUNNERS = {"acopf": run_opf, "fpacopf": run_opf, "rates": run_rates, "kmc": run_kmc, "validate": run_validate}


def run(cfg: ExperimentConfig) -> dict:
    out = {}
    for name, cell in sweep_cells(cfg):
        d = Path(cfg.out) / name if name else Path(cfg.out)
        out[name or cfg.mode] = RUNNERS[cell.mode](cell, d)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = make_config(args)
    except (ConfigError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"cascadeopf: error: {exc}", file=sys.stderr)
        return 2
    if cfg.threads > 1:
        os.environ.setdefault("OMP_NUM_THREADS", "1")
    try:
        summary = run(cfg)
    except (CaseParseError, CaseValidationError, FileNotFoundError, ConfigError) as exc:
        print(f"cascadeopf: error: {exc}", file=sys.stderr)
        return 2
    except (SolveError, fpacopf.FpacopfError, NoConvergence, UnstableEquilibrium, np.linalg.LinAlgError) as exc:
        print(f"cascadeopf: solver failure: {exc}", file=sys.stderr)
        if isinstance(exc, fpacopf.FpacopfError) and exc.active:
            print(f"cascadeopf: final active set: {exc.active}", file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, default=lambda v: None if isinstance(v, float) and math.isnan(v) else float(v)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
