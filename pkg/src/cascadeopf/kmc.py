"""Kinetic Monte Carlo simulation of cascading line failures.

After an initial pair of outages the system re-equilibrates, the failure rate of every
surviving line is evaluated at the new equilibrium, and the next failure is the
minimum of independent exponential clocks. Buses cut off from the slack bus or with
voltage below a threshold are disconnected and their demand counts as shed load.

The module also provides an Euler-Maruyama first-passage estimator used to validate
the rate formula on small networks.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, shortest_path

from . import failrate
from .energy import DispatchPoint, EnergyModel, NoConvergence, UnstableEquilibrium, find_equilibrium, full_voltages
from .netmodel import Network

ZIPF_S = 3.0
ZIPF_N = 10
UNDER_VOLTAGE = 0.9
UV_ROUNDS = 5
# gap/tau above which a line is skipped: the log prefactor stays below ~20 on the
# bundled cases, so skipped lines have rates under exp(-80) 1/s
PRUNE_GAP = 100.0
DEFAULT_HORIZON = 3600.0


# ---------------------------------------------------------------------------
# initial contingencies
# ---------------------------------------------------------------------------


def zipf_pmf(s: float = ZIPF_S, n: int = ZIPF_N) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=float) ** -s
    return w / w.sum()


def line_distances(network: Network, mode: str = "line") -> np.ndarray:
    """Hop distance between lines: in the line graph (default) or 1 + bus-graph distance between endpoints."""
    f, t = network.line_from, network.line_to
    L = network.n_line
    if mode == "line":
        inc = csr_matrix((np.ones(2 * L), (np.r_[np.arange(L), np.arange(L)], np.r_[f, t])), shape=(L, network.n_bus))
        adj = (inc @ inc.T).tocsr()
        adj.setdiag(0)
        adj.eliminate_zeros()
        return shortest_path(adj, unweighted=True, directed=False)
    if mode == "bus":
        A = csr_matrix((np.ones(2 * L), (np.r_[f, t], np.r_[t, f])), shape=(network.n_bus,) * 2)
        db = shortest_path(A, unweighted=True, directed=False)
        ends = np.stack([f, t], axis=1)
        d = np.min(np.stack([db[np.ix_(ends[:, i], ends[:, j])] for i in range(2) for j in range(2)]), axis=0) + 1
        np.fill_diagonal(d, 0)
        return d
    raise ValueError(f"unknown distance mode {mode!r}")


@dataclass(frozen=True)
class ContingencyPair:
    first_line: int
    second_line: int
    sampled_distance: int


def sample_initial_contingencies(network: Network, rng: np.random.Generator, distances: np.ndarray | None = None,
                                 max_attempts: int = 100) -> ContingencyPair:
    """First line uniform; distance from a truncated Zipf law; second line uniform at that distance."""
    L = network.n_line
    if L < 2:
        raise ValueError("need at least two lines to sample a contingency pair")
    D = line_distances(network) if distances is None else distances
    pmf = zipf_pmf()
    first = int(rng.integers(L))
    for _ in range(max_attempts):
        d = int(rng.choice(ZIPF_N, p=pmf)) + 1
        group = np.flatnonzero(D[first] == d)
        if len(group):
            return ContingencyPair(first, int(rng.choice(group)), d)
    # fall back to the nearest distance that has lines
    avail = np.unique(D[first][(np.arange(L) != first) & np.isfinite(D[first])]).astype(int)
    if len(avail) == 0:
        raise ValueError("no other line is reachable from the first contingency")
    d = int(avail[np.argmin(np.abs(avail - d))])
    group = np.flatnonzero(D[first] == d)
    return ContingencyPair(first, int(rng.choice(group)), d)


# ---------------------------------------------------------------------------
# cascade state
# ---------------------------------------------------------------------------

CAUSES = ("rate-sampled", "immediate-overtrip", "islanded")


@dataclass
class CascadeEvent:
    time: float
    failed_line: int  # -1 for a collapse record
    load_shed_increment: float
    disconnected_buses: list[int]
    cause: str


@dataclass
class CascadeTrace:
    initial: ContingencyPair
    events: list[CascadeEvent] = field(default_factory=list)
    total_failed_lines: int = 0
    total_load_shed: float = 0.0
    terminated: str = "horizon"
    horizon: float = DEFAULT_HORIZON
    initial_shed: float = 0.0
    unresolved_rates: int = 0

    def failure_times(self) -> np.ndarray:
        return np.array([e.time for e in self.events if e.failed_line >= 0])


@dataclass
class CascadeOptions:
    horizon: float = DEFAULT_HORIZON
    tau: float = 1e-4
    under_voltage: float = UNDER_VOLTAGE
    uv_rounds: int = UV_ROUNDS
    include_initial: bool = False
    prune_gap: float = PRUNE_GAP
    energy_kw: dict = field(default_factory=dict)


class _Grid:
    """Mutable topology and voltage profile of one cascade, in original indices."""

    def __init__(self, network: Network, x: np.ndarray, y: DispatchPoint):
        self.net = network
        V, th = full_voltages(network, x, y)
        self.V = V.copy()
        self.th = th.copy()
        self.y = y
        self.line_up = np.ones(network.n_line, dtype=bool)
        self.bus_up = np.ones(network.n_bus, dtype=bool)
        self.sub: Network | None = None
        self.sub_buses = np.arange(network.n_bus)
        self.sub_lines = np.arange(network.n_line)
        self.x = None
        self.y_sub = None

    def energized_lines(self) -> np.ndarray:
        n = self.net
        return self.line_up & self.bus_up[n.line_from] & self.bus_up[n.line_to]

    def island(self) -> np.ndarray:
        """Buses still up but no longer connected to the slack bus."""
        n = self.net
        ok = self.energized_lines()
        f, t = n.line_from[ok], n.line_to[ok]
        A = csr_matrix((np.ones(2 * len(f)), (np.r_[f, t], np.r_[t, f])), shape=(n.n_bus, n.n_bus))
        reach = breadth_first_order(A, n.slack, directed=False, return_predecessors=False)
        mask = np.zeros(n.n_bus, dtype=bool)
        mask[reach] = True
        return np.flatnonzero(self.bus_up & ~mask)

    def disconnect(self, buses) -> float:
        buses = np.asarray(buses, dtype=int)
        self.bus_up[buses] = False
        return float(np.sum(self.net.p_d[buses]))

    def build(self):
        n = self.net
        self.sub_buses = np.flatnonzero(self.bus_up)
        self.sub_lines = np.flatnonzero(self.energized_lines())
        self.sub = n.subnetwork(self.sub_buses, self.sub_lines)
        kept_gens = [g.id for g in n.generators if self.bus_up[g.bus]]
        sub = self.sub
        v_gen = self.V[self.sub_buses[sub.gen_buses]]
        self.y_sub = DispatchPoint(v_gen, self.y.theta_slack, np.asarray(self.y.p_g)[kept_gens],
                                   np.asarray(self.y.q_g)[kept_gens])
        idx = sub.index
        Vs, ths = self.V[self.sub_buses], self.th[self.sub_buses]
        return np.concatenate([Vs[idx.load_buses], ths[idx.angle_buses]])

    def store(self, x):
        self.x = x
        V, th = full_voltages(self.sub, x, self.y_sub)
        self.V[self.sub_buses] = V
        self.th[self.sub_buses] = th


def _settle(grid: _Grid, opts: CascadeOptions) -> tuple[list[int], float, bool]:
    """Islanding, re-equilibration and under-voltage disconnection; returns (buses, shed, collapsed)."""
    lost: list[int] = []
    shed = 0.0
    for _ in range(opts.uv_rounds + 1):
        isl = grid.island()
        if len(isl):
            lost.extend(isl.tolist())
            shed += grid.disconnect(isl)
        if np.sum(grid.net.p_d[grid.bus_up]) <= 0:
            return lost, shed, True
        x0 = grid.build()
        if grid.sub.index.d_static == 0:
            grid.store(x0)
            return lost, shed, False
        try:
            x = find_equilibrium(grid.sub, grid.y_sub, x0)
        except (NoConvergence, UnstableEquilibrium, np.linalg.LinAlgError):
            return lost, shed, True
        grid.store(x)
        V = grid.V[grid.sub_buses]
        low = grid.sub_buses[(V < opts.under_voltage) & ~grid.sub.is_gen_bus]
        if len(low) == 0:
            return lost, shed, False
        lost.extend(low.tolist())
        shed += grid.disconnect(low)
    return lost, shed, False


def next_failure(rates: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    """Index and waiting time of the first of independent exponential clocks (inf when all rates vanish)."""
    live = np.flatnonzero(rates > 0)
    if len(live) == 0:
        return -1, math.inf
    t = rng.exponential(1.0 / rates[live])
    k = int(np.argmin(t))
    return int(live[k]), float(t[k])


def simulate_cascade(network: Network, x: np.ndarray, y: DispatchPoint, pair: ContingencyPair,
                     rng: np.random.Generator, options: CascadeOptions | None = None) -> CascadeTrace:
    """One cascade from the equilibrium (x, y) of the intact network after the given initial outages."""
    opts = options or CascadeOptions()
    grid = _Grid(network, x, y)
    trace = CascadeTrace(pair, horizon=opts.horizon)
    grid.line_up[[pair.first_line, pair.second_line]] = False
    lost, shed, collapsed = _settle(grid, opts)
    if collapsed:
        shed += grid.disconnect(np.flatnonzero(grid.bus_up))
    trace.initial_shed = shed
    if opts.include_initial:
        trace.total_failed_lines = 2
        trace.total_load_shed = shed
    if collapsed:
        trace.terminated = "collapse"
        return trace
    t = 0.0
    while True:
        sub = grid.sub
        if not np.any(sub.failure_set):
            break
        model = EnergyModel(sub, tau=opts.tau, **opts.energy_kw)
        table = failrate.failure_rates(model, grid.x, grid.y_sub, prune=True, prune_gap=opts.prune_gap)
        lines = grid.sub_lines[table.lines]
        lam = np.where(np.isfinite(table.lam) | np.isinf(table.lam), table.lam, 0.0)
        trace.unresolved_rates += int(np.sum(np.isnan(table.lam)))
        over = np.flatnonzero(np.isinf(lam))
        if len(over):
            failing, cause = lines[over].tolist(), "immediate-overtrip"
        else:
            k, dt = next_failure(lam, rng)
            if k < 0 or t + dt > opts.horizon:
                break
            t_new = t + dt
            t = t_new if t_new > t else float(np.nextafter(t, np.inf))
            failing, cause = [int(lines[k])], "rate-sampled"
        for l in failing:
            # simultaneous trips are spaced by one ulp so event times stay strictly increasing
            if trace.events and t <= trace.events[-1].time:
                t = float(np.nextafter(trace.events[-1].time, np.inf))
            grid.line_up[l] = False
            trace.events.append(CascadeEvent(t, int(l), 0.0, [], cause))
            trace.total_failed_lines += 1
        up_before = grid.bus_up.copy()
        lost, shed, collapsed = _settle(grid, opts)
        if collapsed:
            shed += grid.disconnect(np.flatnonzero(grid.bus_up))
        last = trace.events[-1]
        last.load_shed_increment = shed
        last.disconnected_buses = np.flatnonzero(up_before & ~grid.bus_up).tolist()
        trace.total_load_shed += shed
        if collapsed:
            trace.terminated = "collapse"
            break
    return trace


# ---------------------------------------------------------------------------
# batches and statistics
# ---------------------------------------------------------------------------


def run_rngs(seed: int, run_index: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for the contingency draw and the event clocks of one run."""
    return np.random.default_rng([seed, run_index, 0]), np.random.default_rng([seed, run_index, 1])


@dataclass
class CascadeStats:
    n_runs: int
    failed: np.ndarray
    shed: np.ndarray
    mean_failed: float
    sd_failed: float
    mean_shed: float
    sd_shed: float
    survival_failed: tuple[np.ndarray, np.ndarray]
    survival_shed: tuple[np.ndarray, np.ndarray]
    timeline: tuple[np.ndarray, np.ndarray]
    collapses: int


def survival(values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return np.array([np.mean(values >= v) for v in thresholds]) if len(values) else np.zeros(len(thresholds))


def cascade_stats(traces: list[CascadeTrace], horizon: float = DEFAULT_HORIZON, n_grid: int = 361) -> CascadeStats:
    failed = np.array([tr.total_failed_lines for tr in traces], dtype=float)
    shed = np.array([tr.total_load_shed for tr in traces], dtype=float)
    sd = (lambda a: float(np.std(a, ddof=1)) if len(a) > 1 else 0.0)
    kmax = int(failed.max()) if len(failed) else 0
    k_thr = np.arange(1, max(kmax, 1) + 1, dtype=float)
    s_thr = np.unique(shed[shed > 0])
    grid = np.linspace(0.0, horizon, n_grid)
    hit = [tr for tr in traces if len(tr.failure_times())]
    if hit:
        counts = np.array([np.searchsorted(np.sort(tr.failure_times()), grid, side="right") for tr in hit])
        timeline = counts.mean(axis=0)
    else:
        timeline = np.zeros(n_grid)
    return CascadeStats(
        n_runs=len(traces), failed=failed, shed=shed,
        mean_failed=float(failed.mean()) if len(failed) else 0.0, sd_failed=sd(failed),
        mean_shed=float(shed.mean()) if len(shed) else 0.0, sd_shed=sd(shed),
        survival_failed=(k_thr, survival(failed, k_thr)), survival_shed=(s_thr, survival(shed, s_thr)),
        timeline=(grid, timeline), collapses=sum(tr.terminated == "collapse" for tr in traces),
    )


def _one_run(args):
    network, x, y, seed, i, distances, opts = args
    r_pair, r_sim = run_rngs(seed, i)
    pair = sample_initial_contingencies(network, r_pair, distances)
    return simulate_cascade(network, x, y, pair, r_sim, opts)


def run_batch(network: Network, dispatches: dict, n_runs: int, seed: int = 0,
              options: CascadeOptions | None = None, distance_mode: str = "line",
              workers: int = 1) -> dict:
    """Paired-seed batches: run i uses the same contingency pair and clock stream for every dispatch.

    ``dispatches`` maps a name to an (x, y) equilibrium of the intact network. Returns a
    mapping name -> (traces, CascadeStats) with traces ordered by run index.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    opts = options or CascadeOptions()
    D = line_distances(network, distance_mode)
    out = {}
    for name, (x, y) in dispatches.items():
        jobs = [(network, x, y, seed, i, D, opts) for i in range(n_runs)]
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                traces = list(ex.map(_one_run, jobs, chunksize=max(1, n_runs // (4 * workers))))
        else:
            traces = [_one_run(j) for j in jobs]
        out[name] = (traces, cascade_stats(traces, opts.horizon))
    return out


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ("run", "time_s", "line_id", "shed_pu", "cause", "n_disconnected")


def write_traces(traces: list[CascadeTrace], network: Network, header: list[str] | None = None) -> str:
    buf = io.StringIO()
    for h in header or []:
        buf.write(f"# {h}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for i, tr in enumerate(traces):
        for e in tr.events:
            lid = network.lines[e.failed_line].label if e.failed_line >= 0 else -1
            w.writerow([i, f"{e.time:.9e}", lid, f"{e.load_shed_increment:.9e}", e.cause, len(e.disconnected_buses)])
    return buf.getvalue()


def write_stats(stats: dict, header: list[str] | None = None) -> str:
    """Summary table (mean and sd per dispatch) followed by the survival tables."""
    buf = io.StringIO()
    for h in header or []:
        buf.write(f"# {h}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dispatch", "runs", "mean_failed_lines", "sd_failed_lines", "mean_shed_pu", "sd_shed_pu", "collapses"])
    for name, st in stats.items():
        w.writerow([name, st.n_runs, f"{st.mean_failed:.6f}", f"{st.sd_failed:.6f}", f"{st.mean_shed:.6f}",
                    f"{st.sd_shed:.6f}", st.collapses])
    buf.write("\n")
    w.writerow(["dispatch", "quantity", "threshold", "fraction"])
    for name, st in stats.items():
        for q, (thr, frac) in (("failed_lines", st.survival_failed), ("shed_pu", st.survival_shed)):
            for a, b in zip(thr, frac):
                w.writerow([name, q, f"{a:.9g}", f"{b:.9g}"])
    return buf.getvalue()


def survival_data(st: CascadeStats, quantity: str) -> str:
    thr, frac = st.survival_failed if quantity == "failed" else st.survival_shed
    return "".join(f"{a:.9g} {b:.9g}\n" for a, b in zip(thr, frac) if b > 0)


def timeline_data(st: CascadeStats) -> str:
    t, c = st.timeline
    return "".join(f"{a:.9g} {b:.9g}\n" for a, b in zip(t, c))


def gnuplot_script(names: list[str]) -> str:
    """Script plotting the survival curves (log-log) and the failure timeline from the data files."""
    def plot(suffix, style):
        return ", \\\n     ".join(f"'{n}_{suffix}.dat' using 1:2 with {style} title '{n}'" for n in names)

    return (
        "set terminal pngcairo size 800,600\n"
        "set logscale xy\nset grid\n"
        "set output 'survival_failed.png'\nset xlabel 'failed lines'\nset ylabel 'P(X >= x)'\n"
        f"plot {plot('failed', 'steps')}\n"
        "set output 'survival_shed.png'\nset xlabel 'load shed (p.u.)'\n"
        f"plot {plot('shed', 'steps')}\n"
        "unset logscale\nset output 'timeline.png'\nset xlabel 'time (s)'\nset ylabel 'mean failed lines'\n"
        f"plot {plot('timeline', 'lines')}\n"
    )


# ---------------------------------------------------------------------------
# first-passage validation
# ---------------------------------------------------------------------------


@dataclass
class FirstPassage:
    mean: float
    ci_low: float
    ci_high: float
    times: np.ndarray
    n_censored: int


def _batched_gradient(network: Network, y: DispatchPoint, X: np.ndarray) -> np.ndarray:
    """Energy gradient for a batch of static states (rows of X)."""
    idx = network.index
    n = network.n_bus
    P = X.shape[0]
    V = np.ones((P, n))
    V[:, network.gen_buses] = y.v_gen
    V[:, idx.load_buses] = X[:, : idx.n_v]
    th = np.full((P, n), y.theta_slack)
    th[:, idx.angle_buses] = X[:, idx.n_v :]
    B = network.B
    p_net = network.p_d - network.gen_incidence @ np.asarray(y.p_g)
    q_net = network.q_d - network.gen_incidence @ np.asarray(y.q_g)
    c, s = np.cos(th), np.sin(th)
    # (B sin(th_i - th_j)) V and (B cos) V, expanded to avoid P x n x n temporaries
    Vc, Vs = V * c, V * s
    BVc, BVs = Vc @ B.T, Vs @ B.T
    g_th = p_net + V * (s * BVc - c * BVs)
    g_v = q_net / V - (c * BVc + s * BVs)
    return np.concatenate([g_v[:, idx.load_buses], g_th[:, idx.angle_buses]], axis=1)


def euler_maruyama_first_passage(model: EnergyModel, y: DispatchPoint, line: int, x_bar: np.ndarray, dt: float,
                                 n_paths: int, rng: np.random.Generator, max_steps: int = 1_000_000,
                                 theta_max: float | None = None) -> FirstPassage:
    """Mean first time Theta_line reaches Theta_max for dx = -S grad H dt + sqrt(2 tau S) dW from x_bar.

    The conservative coupling is omitted on the static state; paths still running after
    ``max_steps`` are censored and excluded from the mean.
    """
    net = model.network
    S = model.s_diag()
    tmax = net.lines[line].theta_max if theta_max is None else theta_max
    X = np.tile(np.asarray(x_bar, dtype=float), (n_paths, 1))
    times = np.full(n_paths, np.nan)
    alive = np.ones(n_paths, dtype=bool)
    f, t = net.line_from[line], net.line_to[line]
    ysq = net.line_y[line] ** 2
    idx = net.index
    noise = np.sqrt(2.0 * model.tau * S * dt)

    def theta_rows(Xa):
        V = np.ones((len(Xa), net.n_bus))
        V[:, net.gen_buses] = y.v_gen
        V[:, idx.load_buses] = Xa[:, : idx.n_v]
        th = np.full((len(Xa), net.n_bus), y.theta_slack)
        th[:, idx.angle_buses] = Xa[:, idx.n_v :]
        return ysq * (V[:, f] ** 2 + V[:, t] ** 2 - 2 * V[:, f] * V[:, t] * np.cos(th[:, f] - th[:, t]))

    hit = theta_rows(X) >= tmax
    times[hit] = 0.0
    alive &= ~hit
    for step in range(1, max_steps + 1):
        if not alive.any():
            break
        ia = np.flatnonzero(alive)
        Xa = X[ia]
        Xa = Xa - dt * S * _batched_gradient(net, y, Xa) + noise * rng.standard_normal(Xa.shape)
        bad = np.any(Xa[:, : idx.n_v] <= 0, axis=1)
        Xa[bad] = X[ia[bad]]
        X[ia] = Xa
        done = theta_rows(Xa) >= tmax
        times[ia[done]] = step * dt
        alive[ia[done]] = False
    done_t = times[np.isfinite(times)]
    n_c = int(np.sum(~np.isfinite(times)))
    if len(done_t) == 0:
        return FirstPassage(math.nan, math.nan, math.nan, done_t, n_c)
    m = float(np.mean(done_t))
    half = 1.96 * float(np.std(done_t, ddof=1)) / math.sqrt(len(done_t)) if len(done_t) > 1 else math.inf
    return FirstPassage(m, m - half, m + half, done_t, n_c)
