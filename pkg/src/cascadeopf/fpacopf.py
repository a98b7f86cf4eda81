"""AC optimal power flow with failure-rate constraints on selected lines.

The base problem is a standard polar-form ACOPF with quadratic generation cost and
flow limits on the squared current magnitude. The rate-constrained problem adds, for
each line in a working set, the failure point, its multiplier and the linear-response
matrix Z as extra variables, tied to the dispatch through the local optimality
conditions. The working set grows by screening the incumbent with the closed-form
rates until no line exceeds its limit.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from . import failrate, nlp
from .energy import DispatchPoint, EnergyModel, energy_hessian, is_positive_definite
from .netmodel import Network
from .opfmodel import MU_FLOOR, SOSC_MARGIN, OpfModel

VIOLATION_RTOL = 1e-4
UNCERTIFIED = "uncertified"


def default_options(**kw) -> nlp.SolverOptions:
    """Solver settings for OPF problems: a tight scaled tolerance keeps the unscaled certificate below 1e-6."""
    base = dict(tol=1e-10, max_iter=500)
    base.update(kw)
    return nlp.SolverOptions(**base)


def warm_options(opts: nlp.SolverOptions) -> nlp.SolverOptions:
    """Settings for rounds that start from an incumbent: a small barrier and tiny bound pushes."""
    from dataclasses import replace

    return replace(opts, mu_init=min(opts.mu_init, 1e-6), bound_push=min(opts.bound_push, 1e-8),
                   bound_frac=min(opts.bound_frac, 1e-8))


class FpacopfError(RuntimeError):
    """Constraint generation stopped without a certified dispatch.

    ``active`` is the working set at the point of failure and ``solution`` the last
    incumbent, when one exists.
    """

    def __init__(self, message: str, active=None, solution=None):
        super().__init__(message)
        self.active = list(active or [])
        self.solution = solution


@dataclass
class RoundRecord:
    round: int
    active: list[int]
    added: list[int]
    objective: float
    max_rate: float
    status: str
    iterations: int
    solve_time: float
    screen_time: float


@dataclass
class DispatchSolution:
    """Optimal dispatch, the matching equilibrium and the per-line rate summary."""

    network: Network
    y: DispatchPoint
    x: np.ndarray
    w: np.ndarray
    objective: float
    status: str
    rates: failrate.RateTable | None = None
    active: list[int] = field(default_factory=list)
    line_vars: dict = field(default_factory=dict)
    rounds: list[RoundRecord] = field(default_factory=list)
    nlp: nlp.NlpSolution | None = None
    problem: nlp.NlpProblem | None = None
    certificate: dict | None = None
    p_shed: np.ndarray | None = None
    q_shed: np.ndarray | None = None
    hessian_pd: bool = True
    wall_time: float = 0.0
    failed_round: int | None = None

    @property
    def max_rate(self) -> float:
        return self.rates.max_rate() if self.rates is not None else math.nan

    @property
    def shed_fraction(self) -> float:
        if self.p_shed is None:
            return 0.0
        return float(np.sum(np.abs(self.p_shed)) / self.network.total_demand())

    def generation_cost(self) -> float:
        return float(sum(g.cost_value(p) for g, p in zip(self.network.generators, self.y.p_g)))


# ---------------------------------------------------------------------------
# problem construction
# ---------------------------------------------------------------------------


def _np(a) -> np.ndarray:
    return np.asarray(a, dtype=float)


def base_bounds(om: OpfModel) -> tuple[np.ndarray, np.ndarray]:
    net = om.network
    L = om.layout
    lo = np.full(L.n, -np.inf)
    hi = np.full(L.n, np.inf)
    lo[L.v] = [b.v_min for b in net.buses]
    hi[L.v] = [b.v_max for b in net.buses]
    lo[L.p] = [g.p_min for g in net.generators]
    hi[L.p] = [g.p_max for g in net.generators]
    lo[L.q] = [g.q_min for g in net.generators]
    hi[L.q] = [g.q_max for g in net.generators]
    return lo, hi


def base_con_bounds(om: OpfModel) -> tuple[np.ndarray, np.ndarray]:
    n = om.network.n_bus
    lim = om.network.i_lim[om.limited] ** 2
    gl = np.concatenate([np.zeros(2 * n), np.full(len(lim), -np.inf)])
    gu = np.concatenate([np.zeros(2 * n), lim])
    return gl, gu


def initial_point(om: OpfModel, y: DispatchPoint | None = None, x: np.ndarray | None = None) -> np.ndarray:
    """Flat start (midpoint generation, unit voltages) or the given dispatch and state."""
    net = om.network
    L = om.layout
    lo, hi = base_bounds(om)
    w = np.zeros(L.n)
    if y is None:
        w[L.v] = np.clip(1.0, lo[L.v], hi[L.v])
        w[L.th] = 0.0
        w[L.p] = 0.5 * (lo[L.p] + hi[L.p])
        w[L.q] = 0.5 * (lo[L.q] + hi[L.q])
        return w
    idx = net.index
    V = np.ones(net.n_bus)
    V[net.gen_buses] = y.v_gen
    th = np.zeros(net.n_bus)
    if x is not None:
        V[idx.load_buses] = x[: idx.n_v]
        th[idx.angle_buses] = x[idx.n_v :]
    w[L.v] = V
    w[L.th] = th[idx.angle_buses]
    w[L.p] = y.p_g
    w[L.q] = y.q_g
    return w


def dispatch_from_w(om: OpfModel, w: np.ndarray) -> tuple[DispatchPoint, np.ndarray]:
    net = om.network
    L = om.layout
    V = w[L.v]
    y = DispatchPoint(V[net.gen_buses].copy(), om.slack_theta, w[L.p].copy(), w[L.q].copy())
    return y, _np(om.x_of(jnp.asarray(w)))


@dataclass
class _LineBlock:
    line: int
    rank: int
    params: dict
    jparams: dict
    u0: np.ndarray
    lam0: np.ndarray | None = None


def _warm_block(om: OpfModel, ctx, table: failrate.RateTable, k: int, lambda_lim: float) -> _LineBlock:
    line = int(table.lines[k])
    prm = om.line_params(line, lambda_lim)
    r = prm["rank"]
    xs = failrate.full_failure_point(ctx, table, k)
    Z = failrate.full_z(ctx, table, k)
    u0 = np.concatenate([xs, [max(table.mu[k], 10 * MU_FLOOR)], Z.T.reshape(-1)])
    return _LineBlock(line, r, prm, OpfModel.jax_params(prm), u0)


def build_problem(om: OpfModel, w0: np.ndarray, blocks: list[_LineBlock], lam0=None) -> nlp.NlpProblem:
    """Assemble the NLP; with an empty block list this is the plain ACOPF."""
    nw = om.layout.n
    d = om.d
    lo, hi = base_bounds(om)
    gl0, gu0 = base_con_bounds(om)
    m0 = len(gl0)
    var_sizes, con_sizes = [], []
    xl, xu, gl, gu, x0 = [lo], [hi], [gl0], [gu0], [w0]
    for blk in blocks:
        nu, mc = om.block_size(blk.rank)
        var_sizes.append(nu)
        con_sizes.append(mc)
        ul = np.full(nu, -np.inf)
        uu = np.full(nu, np.inf)
        ul[d] = MU_FLOOR
        xl.append(ul)
        xu.append(uu)
        gl.append(np.concatenate([np.zeros(nu), [-np.inf, -np.inf]]))
        gu.append(np.concatenate([np.zeros(nu), [0.0, 1.0 - SOSC_MARGIN]]))
        x0.append(blk.u0)
    st = nlp.BlockStructure(nw, m0, var_sizes, con_sizes)
    funcs = [om.block_funcs(b.rank) for b in blocks]

    def split(x):
        return x[:nw], [x[st.var_slice(k)] for k in range(len(blocks))]

    def objective(x):
        return float(om.objective(jnp.asarray(x[:nw])))

    def gradient(x):
        g = np.zeros(st.n)
        g[:nw] = _np(om.gradient(jnp.asarray(x[:nw])))
        return g

    def constraints(x):
        w, us = split(x)
        wj = jnp.asarray(w)
        out = [_np(om.cons0(wj))]
        for blk, f, u in zip(blocks, funcs, us):
            out.append(_np(f["cons"](wj, jnp.asarray(u), blk.jparams)))
        return np.concatenate(out)

    def jacobian(x):
        w, us = split(x)
        wj = jnp.asarray(w)
        parts = []
        for blk, f, u in zip(blocks, funcs, us):
            Jw, Ju = f["jac"](wj, jnp.asarray(u), blk.jparams)
            parts.append((_np(Jw), _np(Ju)))
        return nlp.BlockJacobian(_np(om.jac0(wj)), parts)

    def hessian(x, sigma, lam):
        w, us = split(x)
        wj = jnp.asarray(w)
        Hww = _np(om.hess0(wj, float(sigma), jnp.asarray(lam[:m0])))
        parts = []
        for k, (blk, f, u) in enumerate(zip(blocks, funcs, us)):
            Hz = _np(f["hess"](wj, jnp.asarray(u), jnp.asarray(lam[st.con_slice(k)]), blk.jparams))
            Hww = Hww + Hz[:nw, :nw]
            parts.append((Hz[:nw, nw:], Hz[nw:, nw:]))
        return nlp.BlockHessian(Hww, parts)

    if lam0 is not None:
        lam_init = np.zeros(st.m)
        lam_init[:m0] = lam0[:m0]
        for k, blk in enumerate(blocks):
            if blk.lam0 is not None:
                lam_init[st.con_slice(k)] = blk.lam0
    else:
        lam_init = None
    return nlp.NlpProblem(
        n=st.n, m=st.m, objective=objective, gradient=gradient, constraints=constraints,
        jacobian=jacobian, hessian=hessian, x_l=np.concatenate(xl), x_u=np.concatenate(xu),
        g_l=np.concatenate(gl), g_u=np.concatenate(gu), x0=np.concatenate(x0),
        lam0=lam_init, structure=st,
    )


# ---------------------------------------------------------------------------
# solution assembly
# ---------------------------------------------------------------------------


def _assemble(om: OpfModel, sol: nlp.NlpSolution, problem: nlp.NlpProblem, blocks, rates: bool, t0: float) -> DispatchSolution:
    nw = om.layout.n
    w = sol.x[:nw].copy()
    y, x = dispatch_from_w(om, w)
    net = om.network
    H = energy_hessian(net, x, y)
    table = None
    if rates:
        table = failrate.failure_rates(om.emodel, x, y)
    st = problem.structure
    line_vars = {}
    for k, blk in enumerate(blocks):
        u = sol.x[st.var_slice(k)]
        d = om.d
        line_vars[blk.line] = dict(x_star=u[:d].copy(), mu=float(u[d]), Z=u[d + 1 :].reshape(blk.rank, d).T.copy(),
                                   lam=sol.lam[st.con_slice(k)].copy())
    L = om.layout
    cert = nlp.kkt_residuals(problem, sol.x, sol.lam, sol.z_l, sol.z_u)
    # an early stop at the acceptable level is only accepted when the unscaled certificate holds
    status = UNCERTIFIED if sol.status == nlp.OPTIMAL and not nlp.certificate_ok(cert) else sol.status
    out = DispatchSolution(
        network=net, y=y, x=x, w=w, objective=float(sol.objective), status=status, rates=table,
        active=[b.line for b in blocks], line_vars=line_vars, nlp=sol, problem=problem,
        certificate=cert,
        hessian_pd=is_positive_definite(H), wall_time=time.perf_counter() - t0,
    )
    if om.shed:
        out.p_shed = w[L.ps].copy()
        out.q_shed = w[L.qs].copy()
    return out


def _model(network: Network, tau: float, shed: bool = False, phi: float = 1e6, **energy_kw) -> OpfModel:
    return OpfModel(EnergyModel(network, tau=tau, **energy_kw), shed=shed, phi=phi)


def solve_acopf(network: Network, options: nlp.SolverOptions | None = None, tau: float = 1e-4,
                with_rates: bool = True, model: OpfModel | None = None) -> DispatchSolution:
    """N-0 ACOPF from a flat start."""
    t0 = time.perf_counter()
    om = model or _model(network, tau)
    problem = build_problem(om, initial_point(om), [])
    sol = nlp.solve(problem, options or default_options())
    return _assemble(om, sol, problem, [], with_rates, t0)


# ---------------------------------------------------------------------------
# rate constraints
# ---------------------------------------------------------------------------


def _limits(network: Network, lambda_lim) -> np.ndarray:
    lim = np.broadcast_to(np.asarray(lambda_lim, dtype=float), (network.n_line,)).copy()
    if np.any(lim <= 0):
        raise ValueError("rate limits must be positive")
    return lim


def rate_constraint_residual(om: OpfModel, line: int, w: np.ndarray, x_star: np.ndarray, mu: float,
                             Z: np.ndarray, lambda_lim: float) -> float:
    """Value of the log-rate constraint, i.e. log(rate) - log(lambda_lim) at the given block."""
    prm = om.line_params(line, lambda_lim)
    r = prm["rank"]
    if Z.shape[1] != r:
        raise ValueError(f"Z must have {r} columns for line {line}")
    u = np.concatenate([x_star, [mu], Z.T.reshape(-1)])
    c = om.block_funcs(r)["cons"](jnp.asarray(w), jnp.asarray(u), OpfModel.jax_params(prm))
    return float(c[-2])


def screen_violations(table: failrate.RateTable, limits: np.ndarray, exclude=()) -> list[int]:
    """Rows of ``table`` whose rate exceeds its limit, most violated first.

    Lines whose local optimality conditions have no usable root are reported with a
    warning and treated as non-violating.
    """
    lam = table.lam
    odd = [int(table.lines[k]) for k in range(len(lam)) if table.status[k] in ("no-root", "degenerate")]
    if odd:
        warnings.warn(f"no failure point found for lines {odd}; treated as non-violating", RuntimeWarning,
                      stacklevel=2)
    lim = limits[table.lines]
    bad = [k for k in range(len(lam)) if int(table.lines[k]) not in exclude
           and (table.status[k] == "overtrip" or (np.isfinite(lam[k]) and lam[k] > lim[k] * (1 + VIOLATION_RTOL)))]
    return sorted(bad, key=lambda k: -(table.log_lam[k] - math.log(lim[k])))


def solve_fpacopf(
    network: Network,
    lambda_lim,
    tau: float = 1e-4,
    options: nlp.SolverOptions | None = None,
    max_rounds: int = 20,
    max_add: int | None = None,
    shed: bool = False,
    phi: float = 1e6,
    initial: DispatchSolution | None = None,
    model: OpfModel | None = None,
    log=None,
) -> DispatchSolution:
    """Failure-probability constrained ACOPF by working-set constraint generation."""
    t0 = time.perf_counter()
    om = model or _model(network, tau, shed=shed, phi=phi)
    limits = _limits(network, lambda_lim)
    opts = options or default_options()
    rounds: list[RoundRecord] = []

    if initial is None:
        ts = time.perf_counter()
        problem = build_problem(om, initial_point(om), [])
        sol = nlp.solve(problem, opts)
        inc = _assemble(om, sol, problem, [], True, t0)
        rounds.append(RoundRecord(0, [], [], inc.objective, inc.max_rate, sol.status, sol.iterations,
                                  time.perf_counter() - ts, 0.0))
    else:
        inc = initial
        if om.shed and inc.p_shed is None:
            w = np.zeros(om.layout.n)
            w[: len(inc.w)] = inc.w
            inc.w = w
    if inc.status not in (nlp.OPTIMAL,):
        inc.rounds = rounds
        return inc

    blocks: list[_LineBlock] = []
    warm_w = inc.w
    lam_glob = inc.nlp.lam if inc.nlp is not None else None
    for rnd in range(1, max_rounds + 1):
        ts = time.perf_counter()
        ctx = failrate.EquilibriumContext.build(network, inc.x, inc.y)
        table = inc.rates if inc.rates is not None else failrate.failure_rates(om.emodel, inc.x, inc.y, context=ctx)
        active = {b.line for b in blocks}
        bad = screen_violations(table, limits)
        # lines already constrained whose minimum-gap root differs from the block root are re-seeded
        reseed = [k for k in bad if int(table.lines[k]) in active]
        added = [k for k in bad if int(table.lines[k]) not in active]
        if max_add is not None:
            added = added[:max_add]
        screen_time = time.perf_counter() - ts
        if not added and not reseed:
            break
        for k in added + reseed:
            if table.status[k] != "ok" and not np.isfinite(table.mu[k]):
                raise FpacopfError(f"round {rnd}, line {int(table.lines[k])}: no failure point to start from ({table.status[k]})",
                                   active=[b.line for b in blocks], solution=inc)
        by_line = {b.line: b for b in blocks}
        for k in reseed:
            blk = _warm_block(om, ctx, table, k, limits[table.lines[k]])
            by_line[blk.line] = blk
        for k in added:
            blk = _warm_block(om, ctx, table, k, limits[table.lines[k]])
            by_line[blk.line] = blk
        for b in blocks:
            if b.line not in {int(table.lines[k]) for k in reseed}:
                lv = inc.line_vars.get(b.line)
                if lv is not None:
                    b.u0 = np.concatenate([lv["x_star"], [lv["mu"]], lv["Z"].T.reshape(-1)])
                    b.lam0 = lv["lam"]
        blocks = sorted(by_line.values(), key=lambda b: b.line)
        problem = build_problem(om, warm_w, blocks, lam_glob)
        sol = nlp.solve(problem, warm_options(opts))
        inc = _assemble(om, sol, problem, blocks, True, t0)
        rounds.append(RoundRecord(rnd, [b.line for b in blocks], [int(table.lines[k]) for k in added],
                                  inc.objective, inc.max_rate, inc.status, sol.iterations,
                                  time.perf_counter() - ts - screen_time, screen_time))
        if log is not None:
            log(rounds[-1])
        if inc.status != nlp.OPTIMAL:
            inc.failed_round = rnd
            break
        warm_w = inc.w
        lam_glob = sol.lam
    else:
        if screen_violations(inc.rates, limits):
            inc.rounds = rounds
            inc.wall_time = time.perf_counter() - t0
            raise FpacopfError(f"round limit {max_rounds} reached with violations remaining",
                               active=inc.active, solution=inc)
    inc.rounds = rounds
    inc.wall_time = time.perf_counter() - t0
    return inc


def solve_fpacopf_with_shedding(network: Network, lambda_lim, tau: float = 1e-4, phi: float = 1e6,
                                always_shed: bool = False, **kw) -> DispatchSolution:
    """Rate-constrained ACOPF with penalized load-shedding variables at every bus.

    Shedding is a recovery device: the plain problem is tried first and returned
    with zero shed when it solves. A quadratic penalty alone would always shed a
    little, since its slope vanishes at zero. ``always_shed`` skips the first try.
    """
    if not always_shed:
        try:
            sol = solve_fpacopf(network, lambda_lim, tau=tau, **kw)
        except FpacopfError:
            sol = None
        if sol is not None and sol.status == nlp.OPTIMAL:
            sol.p_shed = np.zeros(network.n_bus)
            sol.q_shed = np.zeros(network.n_bus)
            return sol
        kw.pop("initial", None)
    return solve_fpacopf(network, lambda_lim, tau=tau, shed=True, phi=phi, **kw)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def solution_dict(sol: DispatchSolution) -> dict:
    net = sol.network
    out = {
        "case": net.name,
        "status": sol.status,
        "objective": sol.objective,
        "generation_cost": sol.generation_cost(),
        "max_rate": sol.max_rate,
        "active_lines": [net.lines[k].label for k in sol.active],
        "hessian_positive_definite": bool(sol.hessian_pd),
        "generators": [
            {"label": g.label, "bus": net.buses[g.bus].label, "p": float(p), "q": float(q)}
            for g, p, q in zip(net.generators, sol.y.p_g, sol.y.q_g)
        ],
        "buses": [
            {"label": b.label, "v": float(v), "theta": float(t)}
            for b, v, t in zip(net.buses, sol.w[sol_layout_v(sol)], _angles(sol))
        ],
    }
    if sol.p_shed is not None:
        out["shed_fraction"] = sol.shed_fraction
        out["p_shed"] = sol.p_shed.tolist()
        out["q_shed"] = sol.q_shed.tolist()
    if sol.certificate is not None:
        out["certificate"] = {k: float(v) for k, v in sol.certificate.items()}
    return out


def sol_layout_v(sol: DispatchSolution) -> slice:
    return slice(0, sol.network.n_bus)


def _angles(sol: DispatchSolution) -> np.ndarray:
    net = sol.network
    th = np.full(net.n_bus, sol.y.theta_slack)
    th[net.index.angle_buses] = sol.w[net.n_bus : net.n_bus + net.index.n_theta]
    return th


def write_solution(sol: DispatchSolution, path, header: dict | None = None) -> None:
    body = {"header": header or {}, "solution": solution_dict(sol)}
    with open(path, "w") as fh:
        json.dump(body, fh, indent=2, default=float)


def write_timing(sol: DispatchSolution, path) -> None:
    """Per-round timing records, kept apart from the solution so that results stay reproducible."""
    with open(path, "w") as fh:
        json.dump({"wall_time": sol.wall_time, "rounds": [r.__dict__ for r in sol.rounds]}, fh, indent=2)
