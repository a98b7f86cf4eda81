"""Line failure functions, most likely failure points and analytical failure rates.

Every line is handled in a local frame ``u = (V_a, V_b, theta_a, theta_b)`` where ``a``
is a non-generator endpoint whenever the line has one. Coordinates that belong to the
dispatch point (generator-bus voltages, the slack angle) are fixed; the corresponding
rows and columns of the local inverse-Hessian block ``C`` are zero, so the same
batched code serves every line category.

With the energy replaced by its second-order expansion around the equilibrium, the
stationarity condition gives ``x* - x_bar = mu * Hinv[:, P] @ grad_P Theta(x*)`` where
``P`` holds the (at most four) state positions of the line. The most likely failure
point is therefore fully determined by the small system

    u - u_bar - mu * C @ g(u) = 0,   Theta(u) = Theta_max,

which is solved with Newton's method from several seeds; the root with the smallest
energy gap is kept.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .energy import (
    EnergyModel,
    DispatchPoint,
    energy,
    energy_gradient,
    energy_hessian,
    full_voltages,
    state_positions,
)
from .netmodel import Network

LOG_FLOOR = 700.0  # energy gap / tau above which the rate underflows to zero

# search directions for the failure point: the flow gradient plus every nonzero
# {-1, 0, 1} combination of the local coordinates, each shaped by the local covariance
SEED_BASIS = np.array([v for v in itertools.product((-1.0, 0.0, 1.0), repeat=4) if any(v)])


class FailurePointError(RuntimeError):
    """No admissible root of the local optimality system was found."""


class DegenerateRate(ArithmeticError):
    """alpha * det(W) + beta is not positive."""


@dataclass(frozen=True)
class LowRankFactors:
    Q: np.ndarray  # d x r
    K: np.ndarray  # r x r, diagonal

    @property
    def rank(self) -> int:
        return self.K.shape[0]


@dataclass
class FailurePointResult:
    line: int
    theta_bar: float
    theta_max: float
    rank: int
    x_star: np.ndarray | None = None
    mu_star: float = math.nan
    alpha: float = math.nan
    beta: float = math.nan
    A: np.ndarray | None = None
    W: np.ndarray | None = None
    grad_norm_s: float = math.nan
    energy_gap: float = math.nan
    pf0: float = math.nan
    pf1: float = math.nan
    ef: float = math.nan
    lam: float = math.nan
    log_lam: float = math.nan
    status: str = "pending"
    second_order: str = ""
    second_order_exact: bool = False
    n_roots: int = 0
    kkt_residual: float = math.nan
    u_star: np.ndarray | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# local line geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LineFrames:
    """Local coordinates of a set of lines, oriented so that endpoint ``a`` is a load bus."""

    lines: np.ndarray
    a: np.ndarray
    b: np.ndarray
    y: np.ndarray  # series admittance magnitude
    theta_max: np.ndarray
    rank: np.ndarray
    pos: np.ndarray  # L x 4 positions inside x, -1 for dispatch coordinates
    free: np.ndarray  # L x 4 bool


def line_frames(network: Network, lines=None) -> LineFrames:
    if lines is None:
        lines = np.flatnonzero(network.failure_set)
    lines = np.asarray(lines, dtype=int)
    idx = network.index
    f, t = network.line_from[lines], network.line_to[lines]
    gen = network.is_gen_bus
    swap = gen[f] & ~gen[t]
    a = np.where(swap, t, f)
    b = np.where(swap, f, t)
    pos = np.stack([idx.v_pos[a], idx.v_pos[b], idx.th_pos[a], idx.th_pos[b]], axis=1)
    rank = np.where(~gen[a] & ~gen[b], 3, 2)
    rank = np.where(gen[a] & gen[b], 1, rank)
    return LineFrames(lines, a, b, network.line_y[lines], network.i_trip[lines] ** 2, rank, pos, pos >= 0)


def local_coords(frames: LineFrames, V: np.ndarray, th: np.ndarray) -> np.ndarray:
    return np.stack([V[frames.a], V[frames.b], th[frames.a], th[frames.b]], axis=-1)


def _theta_local(y, U):
    va, vb, ta, tb = U[..., 0], U[..., 1], U[..., 2], U[..., 3]
    return y**2 * (va * va + vb * vb - 2 * va * vb * np.cos(ta - tb))


def _grad_local(y, U):
    va, vb, ta, tb = U[..., 0], U[..., 1], U[..., 2], U[..., 3]
    c, s = np.cos(ta - tb), np.sin(ta - tb)
    k = 2 * y**2
    vvs = va * vb * s
    return k[..., None] * np.stack([va - vb * c, vb - va * c, vvs, -vvs], axis=-1)


def _hess_local(y, U):
    va, vb, ta, tb = U[..., 0], U[..., 1], U[..., 2], U[..., 3]
    c, s = np.cos(ta - tb), np.sin(ta - tb)
    one = np.ones_like(va)
    vvc = va * vb * c
    rows = [
        [one, -c, vb * s, -vb * s],
        [-c, one, va * s, -va * s],
        [vb * s, va * s, vvc, -vvc],
        [-vb * s, -va * s, -vvc, vvc],
    ]
    h = np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)
    return (2 * y**2)[..., None, None] * h


def _factors_local(y, U, rank):
    """Closed-form Q (L x 4 x 3, zero-padded) and diag(K) (L x 3) in the local frame."""
    va, vb, ta, tb = U[..., 0], U[..., 1], U[..., 2], U[..., 3]
    c, s = np.cos(ta - tb), np.sin(ta - tb)
    z = np.zeros_like(va)
    one = np.ones_like(va)
    R = np.sqrt(np.maximum(va * va + vb * vb + va * vb * c, 0.0))
    q3 = np.stack(
        [
            np.stack([one, -c, vb * s, -vb * s], axis=-1),
            np.stack([z, s, va + vb * c, -va - vb * c], axis=-1),
            np.stack([z, z, R, -R], axis=-1),
        ],
        axis=-1,
    )
    q2 = np.stack(
        [
            np.stack([one, z, vb * s, -vb * s], axis=-1),
            np.stack([z, z, one, -one], axis=-1),
            np.stack([z, z, z, z], axis=-1),
        ],
        axis=-1,
    )
    k3 = np.stack([one, one, -one], axis=-1)
    k2 = np.stack([one, va * vb * c - vb * vb * s * s, one], axis=-1)
    is3 = (rank == 3)[..., None]
    Q = np.where(is3[..., None], q3, q2) * (math.sqrt(2.0) * y)[..., None, None]
    K = np.where(is3, k3, k2)
    return Q, K


def _adj3(Wm):
    r0, r1, r2 = Wm[..., 0, :], Wm[..., 1, :], Wm[..., 2, :]
    c0, c1, c2 = np.cross(r1, r2), np.cross(r2, r0), np.cross(r0, r1)
    det = np.sum(r0 * c0, axis=-1)
    return np.stack([c0, c1, c2], axis=-1), det


# ---------------------------------------------------------------------------
# per-line public helpers
# ---------------------------------------------------------------------------


def theta(network: Network, line: int, x, y: DispatchPoint) -> float:
    """Squared current magnitude of a line, |Y|^2 |V_i e^{i th_i} - V_j e^{i th_j}|^2."""
    V, th = full_voltages(network, x, y)
    i, j = network.line_from[line], network.line_to[line]
    return float(network.line_y[line] ** 2 * (V[i] ** 2 + V[j] ** 2 - 2 * V[i] * V[j] * math.cos(th[i] - th[j])))


def theta_all(network: Network, x, y: DispatchPoint) -> np.ndarray:
    V, th = full_voltages(network, x, y)
    i, j = network.line_from, network.line_to
    return network.line_y**2 * (V[i] ** 2 + V[j] ** 2 - 2 * V[i] * V[j] * np.cos(th[i] - th[j]))


def _scatter(frames, k, local, d):
    out = np.zeros(d)
    for c in range(4):
        p = frames.pos[k, c]
        if p >= 0:
            out[p] += local[c]
    return out


def theta_gradient(network: Network, line: int, x, y: DispatchPoint) -> np.ndarray:
    fr = line_frames(network, [line])
    V, th = full_voltages(network, x, y)
    g = _grad_local(fr.y, local_coords(fr, V, th))[0]
    return _scatter(fr, 0, g, network.index.d_static)


def theta_hessian(network: Network, line: int, x, y: DispatchPoint) -> np.ndarray:
    """Dense Hessian of Theta with respect to x (direct formula, independent of Q and K)."""
    fr = line_frames(network, [line])
    V, th = full_voltages(network, x, y)
    h = _hess_local(fr.y, local_coords(fr, V, th))[0]
    d = network.index.d_static
    out = np.zeros((d, d))
    for r in range(4):
        for c in range(4):
            if fr.pos[0, r] >= 0 and fr.pos[0, c] >= 0:
                out[fr.pos[0, r], fr.pos[0, c]] += h[r, c]
    return out


def theta_derivatives(network: Network, line: int, x, y: DispatchPoint) -> tuple[np.ndarray, LowRankFactors]:
    """Gradient of Theta and its closed-form low-rank Hessian factors Q, K."""
    if not network.failure_set[line]:
        raise ValueError(f"line {line} joins two generator buses; no low-rank factors are defined")
    fr = line_frames(network, [line])
    V, th = full_voltages(network, x, y)
    U = local_coords(fr, V, th)
    g = _scatter(fr, 0, _grad_local(fr.y, U)[0], network.index.d_static)
    Q4, K3 = _factors_local(fr.y, U, fr.rank)
    r = int(fr.rank[0])
    d = network.index.d_static
    Q = np.zeros((d, r))
    for c in range(4):
        p = fr.pos[0, c]
        if p >= 0:
            Q[p] = Q4[0, c, :r]
    return g, LowRankFactors(Q, np.diag(K3[0, :r]))


def failure_probability(lam: float, t: float) -> float:
    if lam < 0 or t < 0:
        raise ValueError("rate and time must be nonnegative")
    return float(-np.expm1(-lam * t))


def rate_limit_from_probability(epsilon: float, t_h: float) -> float:
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    if not t_h > 0:
        raise ValueError("horizon must be positive")
    return float(-np.log1p(-epsilon) / t_h)


# ---------------------------------------------------------------------------
# batched local KKT solve
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EquilibriumContext:
    """Quantities shared by all lines at one equilibrium: inverse Hessian and voltages."""

    network: Network
    x_bar: np.ndarray
    y: DispatchPoint
    hess: np.ndarray
    hinv: np.ndarray
    V: np.ndarray
    th: np.ndarray

    @classmethod
    def build(cls, network: Network, x_bar, y: DispatchPoint, hess: np.ndarray | None = None) -> EquilibriumContext:
        x_bar = np.asarray(x_bar, dtype=float)
        if hess is None:
            hess = energy_hessian(network, x_bar, y)
        d = hess.shape[0]
        if d:
            fac = cho_factor(hess)
            hinv = cho_solve(fac, np.eye(d))
            hinv = 0.5 * (hinv + hinv.T)
        else:
            hinv = np.zeros((0, 0))
        V, th = full_voltages(network, x_bar, y)
        return cls(network, x_bar, y, hess, hinv, V, th)

    def local_c(self, frames: LineFrames) -> np.ndarray:
        L = len(frames.lines)
        C = np.zeros((L, 4, 4))
        if self.hinv.size == 0:
            return C
        p = np.where(frames.free, frames.pos, 0)
        C = self.hinv[p[:, :, None], p[:, None, :]]
        m = frames.free[:, :, None] & frames.free[:, None, :]
        return np.where(m, C, 0.0)


def _kkt_residual(y, tmax, C, Ubar, U, mu):
    g = _grad_local(y, U)
    Cg = np.einsum("lij,lj->li", C, g)
    r1 = U - Ubar - mu[:, None] * Cg
    r2 = (_theta_local(y, U) - tmax) / tmax
    return r1, r2, g, Cg


def _merit(r1, r2):
    return np.sum(r1 * r1, axis=1) + r2 * r2


def _newton(y, tmax, C, Ubar, U, mu, max_iter=60, tol=1e-13):
    """Damped Newton on the local optimality system, batched over rows."""
    N = len(mu)
    U = U.copy()
    mu = mu.copy()
    active = np.ones(N, dtype=bool)
    eye = np.eye(4)
    r1, r2, g, Cg = _kkt_residual(y, tmax, C, Ubar, U, mu)
    f = _merit(r1, r2)
    for _ in range(max_iter):
        active &= ~(f < tol * tol)
        if not active.any():
            break
        ia = np.flatnonzero(active)
        h = _hess_local(y[ia], U[ia])
        J = np.zeros((len(ia), 5, 5))
        J[:, :4, :4] = eye - mu[ia, None, None] * np.einsum("lij,ljk->lik", C[ia], h)
        J[:, :4, 4] = -Cg[ia]
        J[:, 4, :4] = g[ia] / tmax[ia, None]
        rhs = -np.concatenate([r1[ia], r2[ia, None]], axis=1)
        try:
            step = np.linalg.solve(J, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.zeros_like(rhs)
            for k in range(len(ia)):
                step[k] = np.linalg.lstsq(J[k], rhs[k], rcond=None)[0]
        t = np.ones(len(ia))
        pending = np.ones(len(ia), dtype=bool)
        newU, newmu = U[ia].copy(), mu[ia].copy()
        newf = f[ia].copy()
        for _ls in range(30):
            if not pending.any():
                break
            jp = np.flatnonzero(pending)
            Ut = U[ia[jp]] + t[jp, None] * step[jp, :4]
            mt = mu[ia[jp]] + t[jp] * step[jp, 4]
            a1, a2, _, _ = _kkt_residual(y[ia[jp]], tmax[ia[jp]], C[ia[jp]], Ubar[ia[jp]], Ut, mt)
            ft = _merit(a1, a2)
            ok = np.isfinite(ft) & (ft <= (1 - 1e-4 * t[jp]) * f[ia[jp]]) & (Ut[:, 0] > 0) & (Ut[:, 1] > 0)
            acc = jp[ok]
            newU[acc], newmu[acc], newf[acc] = Ut[ok], mt[ok], ft[ok]
            pending[acc] = False
            t[jp[~ok]] *= 0.5
        # lines whose line search failed stop iterating
        active[ia[pending]] = False
        U[ia], mu[ia] = newU, newmu
        r1, r2, g, Cg = _kkt_residual(y, tmax, C, Ubar, U, mu)
        f = _merit(r1, r2)
    converged = f < 1e-20
    return U, mu, converged, np.sqrt(f)


def _ray_to_surface(y, tmax, Ubar, D, t_cap=4.0):
    """Smallest t > 0 with Theta(Ubar + t D) = tmax along each ray (nan when none)."""
    N = len(tmax)
    lo = np.zeros(N)
    hi = np.full(N, np.nan)
    t = np.full(N, 1e-3)
    th0 = _theta_local(y, Ubar)
    found = th0 >= tmax
    hi[found] = 0.0
    for _ in range(60):
        Ut = Ubar + t[:, None] * D
        ok_v = (Ut[:, 0] > 0.05) & (Ut[:, 1] > 0.05)
        above = ok_v & (_theta_local(y, Ut) >= tmax) & ~found
        hi[above] = t[above]
        found |= above
        lo[~found & ok_v] = t[~found & ok_v]
        stop = ~ok_v | (t > t_cap)
        t = np.where(found | stop, t, 2 * t)
        if np.all(found | stop):
            break
    idx = np.flatnonzero(found)
    a, b = lo[idx], hi[idx]
    for _ in range(60):
        m = 0.5 * (a + b)
        above = _theta_local(y[idx], Ubar[idx] + m[:, None] * D[idx]) >= tmax[idx]
        b = np.where(above, m, b)
        a = np.where(above, a, m)
    out = np.full(N, np.nan)
    out[idx] = b
    return out


def _seed_directions(y, C, Ubar, rank):
    g0 = _grad_local(y, Ubar)
    L = len(y)
    base = np.concatenate([g0[None], np.broadcast_to(SEED_BASIS[:, None, :], (len(SEED_BASIS), L, 4))])
    D = np.einsum("lij,slj->sli", C, base)
    nrm = np.linalg.norm(D, axis=2, keepdims=True)
    D = np.where(nrm > 1e-14, D / np.where(nrm > 0, nrm, 1.0), 0.0)
    return D


@dataclass
class _LocalRoots:
    U: np.ndarray
    mu: np.ndarray
    ok: np.ndarray
    n_roots: np.ndarray
    resid: np.ndarray


def _solve_local(frames: LineFrames, C: np.ndarray, Ubar: np.ndarray, warm=None) -> _LocalRoots:
    y, tmax = frames.y, frames.theta_max
    L = len(y)
    D = _seed_directions(y, C, Ubar, frames.rank)
    S = D.shape[0]
    yS = np.tile(y, S)
    tS = np.tile(tmax, S)
    CS = np.tile(C, (S, 1, 1))
    UbS = np.tile(Ubar, (S, 1))
    DS = D.reshape(S * L, 4)
    tt = _ray_to_surface(yS, tS, UbS, DS)
    valid = np.isfinite(tt) & (np.linalg.norm(DS, axis=1) > 0)
    U0 = UbS + np.nan_to_num(tt)[:, None] * DS
    g0 = _grad_local(yS, U0)
    gCg = np.einsum("li,lij,lj->l", g0, CS, g0)
    mu0 = np.einsum("li,li->l", U0 - UbS, g0) / np.where(gCg > 0, gCg, 1.0)
    mu0 = np.where(valid & (mu0 > 0), mu0, 1e-6)
    if warm is not None:
        wu, wmu = warm
        U0 = np.concatenate([U0, wu])
        mu0 = np.concatenate([mu0, wmu])
        yS, tS, CS, UbS = (np.concatenate([a, b]) for a, b in ((yS, y), (tS, tmax), (CS, C), (UbS, Ubar)))
        valid = np.concatenate([valid, np.isfinite(wmu)])
        S += 1
    U, mu, conv, res = _newton(yS, tS, CS, UbS, U0, mu0)
    conv &= valid & (mu > 0)
    U = U.reshape(S, L, 4)
    mu = mu.reshape(S, L)
    conv = conv.reshape(S, L)
    res = res.reshape(S, L)
    g = _grad_local(np.broadcast_to(y, (S, L)), U)
    gCg = np.einsum("sli,lij,slj->sl", g, C, g)
    gap = np.where(conv, 0.5 * mu * mu * gCg, np.inf)
    best = np.argmin(gap, axis=0)
    ar = np.arange(L)
    n_roots = np.zeros(L, dtype=int)
    for l in range(L):
        roots = []
        for s in range(S):
            if conv[s, l] and not any(np.max(np.abs(U[s, l] - r)) < 1e-7 for r in roots):
                roots.append(U[s, l])
        n_roots[l] = len(roots)
    return _LocalRoots(U[best, ar], mu[best, ar], conv[best, ar], n_roots, res[best, ar])


def _continuation(frames: LineFrames, C, Ubar, k, steps=20):
    """Track the root from Theta(u_bar) up to Theta_max for a single line."""
    sl = slice(k, k + 1)
    y, tmax_full = frames.y[sl], frames.theta_max[sl]
    th0 = float(_theta_local(y, Ubar[sl])[0])
    g0 = _grad_local(y, Ubar[sl])
    Cg = np.einsum("lij,lj->li", C[sl], g0)
    gCg = float(np.dot(g0[0], Cg[0]))
    if gCg <= 0:
        return None
    U = Ubar[sl].copy()
    mu = np.array([0.0])
    for f in np.linspace(0, 1, steps + 1)[1:]:
        target = th0 + f * (tmax_full[0] - th0)
        U, mu, conv, _ = _newton(y, np.array([target]), C[sl], Ubar[sl], U, np.maximum(mu, 1e-9))
        if not conv[0] or mu[0] <= 0:
            return None
    return U[0], mu[0]


# ---------------------------------------------------------------------------
# rates
# ---------------------------------------------------------------------------


@dataclass
class RateTable:
    """Vectorized failure-rate results for a set of lines at one equilibrium."""

    lines: np.ndarray
    theta_bar: np.ndarray
    theta_max: np.ndarray
    rank: np.ndarray
    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    det_w: np.ndarray
    grad_norm_s: np.ndarray
    energy_gap: np.ndarray
    log_pf0: np.ndarray
    log_pf1: np.ndarray
    log_ef: np.ndarray
    log_lam: np.ndarray
    lam: np.ndarray
    status: list
    second_order: list
    second_order_exact: np.ndarray
    n_roots: np.ndarray
    U_star: np.ndarray
    A: np.ndarray
    W: np.ndarray
    Z_loc: np.ndarray  # L x 4 x 3: local block of Hinv[:, P] @ Q, scattered into Z by callers
    frames: LineFrames

    def __len__(self):
        return len(self.lines)

    def max_rate(self) -> float:
        return float(np.max(self.lam)) if len(self.lam) else 0.0


def _second_order(mu, A, K, rank):
    """Algebraic second-order test and the exact eigenvalue test per line."""
    algebraic = []
    exact = np.zeros(len(mu), dtype=bool)
    for l in range(len(mu)):
        r = int(rank[l])
        Al = A[l, :r, :r]
        m = mu[l]
        if not np.isfinite(m):
            algebraic.append("n/a")
            continue
        ev = np.linalg.eigvals(Al)
        exact[l] = bool(np.max(m * ev.real) < 1.0)
        k = K[l, :r]
        if r == 2:
            ok = m * np.trace(Al) - m * m * np.linalg.det(Al) < 1.0
            algebraic.append("ok" if ok else "violated")
        elif np.all(k > 0) or np.all(k < 0):
            # symmetric form: sign * |K|^{1/2} Q^T Hinv Q |K|^{1/2}
            sq = np.sqrt(np.abs(k))
            G = (Al / k[:, None]) * sq[:, None] * sq[None, :] * np.sign(k[0])
            Mx = np.eye(r) - m * G
            minors = [np.linalg.det(Mx[:j, :j]) for j in range(1, r + 1)]
            algebraic.append("ok" if all(v > 0 for v in minors) else "violated")
        else:
            ok = m * np.trace(Al) < r
            algebraic.append("relaxed" if ok else "violated")
    return algebraic, exact


def rate_components(
    frames: LineFrames,
    C: np.ndarray,
    Ubar: np.ndarray,
    U: np.ndarray,
    mu: np.ndarray,
    s_loc: np.ndarray,
    tau: float,
):
    """Closed-form rate ingredients from local roots (all arrays batched over lines)."""
    y = frames.y
    g = _grad_local(y, U)
    Q, K = _factors_local(y, U, frames.rank)
    Q = Q * frames.free[:, :, None]
    Cg = np.einsum("lij,lj->li", C, g)
    gCg = np.einsum("li,li->l", g, Cg)
    alpha = mu * gCg
    delta = mu[:, None] * Cg
    CQ = np.einsum("lij,ljk->lik", C, Q)
    A = K[:, :, None] * np.einsum("lji,ljk->lik", Q, CQ)
    W = np.eye(3) - mu[:, None, None] * A
    adjW, detW = _adj3(W)
    qd = np.einsum("lji,lj->li", Q, delta)
    beta = np.einsum("li,lij,lj->l", qd, adjW, K * qd)
    gs = np.einsum("li,li->l", s_loc * g, g)
    denom = alpha * detW + beta
    with np.errstate(divide="ignore", invalid="ignore"):
        log_pf0 = 1.5 * np.log(mu) + np.log(gs) - 0.5 * np.log(2 * np.pi * tau * denom)
        log_corr = np.log1p(2 * tau / (mu * alpha))
    gap = 0.5 * mu * alpha
    log_ef = -gap / tau
    return dict(alpha=alpha, beta=beta, det_w=detW, A=A, W=W, K=K, gs=gs, denom=denom,
                log_pf0=log_pf0, log_pf1=log_pf0 + log_corr, log_ef=log_ef, gap=gap, Z_loc=CQ)


_SIGNS = np.array(list(itertools.product((-1.0, 1.0), repeat=4)))


def gap_lower_bound(frames: LineFrames, C: np.ndarray, Ubar: np.ndarray) -> np.ndarray:
    """Lower bound on the energy gap of each line, valid for every point of its failure surface.

    Uses |V e^{i t} - Vb e^{i tb}| <= |V - Vb| + Vb |t - tb|, so reaching the surface needs
    c^T |u - Ubar| >= (sqrt(Theta_max) - sqrt(Theta_bar)) / y with c = (1, 1, Va, Vb).
    """
    c = np.stack([np.ones(len(Ubar)), np.ones(len(Ubar)), Ubar[:, 0], Ubar[:, 1]], axis=1) * frames.free
    need = (np.sqrt(frames.theta_max) - np.sqrt(np.maximum(_theta_local(frames.y, Ubar), 0.0))) / frames.y
    cs = c[:, None, :] * _SIGNS[None]
    spread = np.max(np.einsum("lsi,lij,lsj->ls", cs, C, cs), axis=1)
    with np.errstate(divide="ignore"):
        return np.where(need > 0, 0.5 * need**2 / spread, 0.0)


def _subset(frames: LineFrames, idx) -> LineFrames:
    return LineFrames(*(getattr(frames, f)[idx] for f in LineFrames.__dataclass_fields__))


def failure_rates(
    model: EnergyModel,
    x_bar,
    y: DispatchPoint,
    lines=None,
    context: EquilibriumContext | None = None,
    warm: tuple[np.ndarray, np.ndarray] | None = None,
    continuation: bool = True,
    prune: bool = False,
    prune_gap: float = LOG_FLOOR,
) -> RateTable:
    """Failure rates of the given lines (default: every line with a non-generator endpoint).

    With ``prune`` the failure point is not searched for lines whose gap lower bound
    already exceeds ``prune_gap`` (in units of tau); those rows get status ``floor``,
    zero rate and NaN roots.
    """
    network = model.network
    ctx = context or EquilibriumContext.build(network, x_bar, y)
    frames = line_frames(network, lines)
    L = len(frames.lines)
    C = ctx.local_c(frames)
    Ubar = local_coords(frames, ctx.V, ctx.th)
    th_bar = _theta_local(frames.y, Ubar)
    over = th_bar >= frames.theta_max
    pruned = np.zeros(L, dtype=bool)
    if prune:
        pruned = ~over & (gap_lower_bound(frames, C, Ubar) / model.tau > prune_gap)
    keep = np.flatnonzero(~pruned)
    U = Ubar.copy()
    mu = np.full(L, np.nan)
    ok = np.zeros(L, dtype=bool)
    n_roots = np.zeros(L, dtype=int)
    if len(keep):
        sub_warm = None if warm is None else (warm[0][keep], warm[1][keep])
        roots = _solve_local(_subset(frames, keep), C[keep], Ubar[keep], sub_warm)
        U[keep], mu[keep], ok[keep], n_roots[keep] = roots.U, roots.mu, roots.ok, roots.n_roots
    if continuation:
        for k in np.flatnonzero(~ok & ~over & ~pruned):
            res = _continuation(frames, C, Ubar, k)
            if res is not None:
                U[k], mu[k], ok[k] = res[0], res[1], True
    mu = np.where(ok, mu, np.nan)
    s_loc = np.where(frames.free, np.array([1 / model.d_v, 1 / model.d_v, 1 / model.d_l, 1 / model.d_l]), 0.0)
    comp = rate_components(frames, C, Ubar, U, mu, s_loc, model.tau)
    log_lam = comp["log_pf1"] + comp["log_ef"]
    status = []
    lam = np.zeros(L)
    for k in range(L):
        if pruned[k]:
            status.append("floor")
            lam[k] = 0.0
            log_lam[k] = -np.inf
        elif over[k]:
            status.append("overtrip")
            lam[k] = np.inf
            log_lam[k] = np.inf
        elif not ok[k]:
            status.append("no-root")
            lam[k] = np.nan
        elif not comp["denom"][k] > 0:
            status.append("degenerate")
            lam[k] = np.nan
        elif comp["gap"][k] / model.tau > LOG_FLOOR:
            status.append("floor")
            lam[k] = 0.0
        else:
            status.append("ok")
            lam[k] = math.exp(log_lam[k])
    so, so_exact = _second_order(mu, comp["A"], comp["K"], frames.rank)
    return RateTable(
        lines=frames.lines,
        theta_bar=th_bar,
        theta_max=frames.theta_max,
        rank=frames.rank,
        mu=mu,
        alpha=comp["alpha"],
        beta=comp["beta"],
        det_w=comp["det_w"],
        grad_norm_s=comp["gs"],
        energy_gap=comp["gap"],
        log_pf0=comp["log_pf0"],
        log_pf1=comp["log_pf1"],
        log_ef=comp["log_ef"],
        log_lam=log_lam,
        lam=lam,
        status=status,
        second_order=so,
        second_order_exact=so_exact,
        n_roots=n_roots,
        U_star=U,
        A=comp["A"],
        W=comp["W"],
        Z_loc=comp["Z_loc"],
        frames=frames,
    )


def full_failure_point(ctx: EquilibriumContext, table: RateTable, k: int) -> np.ndarray:
    """Expand the local root of row k to the full x* = x_bar + mu Hinv[:, P] g."""
    fr = table.frames
    g = _grad_local(fr.y[k : k + 1], table.U_star[k : k + 1])[0]
    gfull = _scatter(fr, k, g, len(ctx.x_bar))
    return ctx.x_bar + table.mu[k] * (ctx.hinv @ gfull)


def full_z(ctx: EquilibriumContext, table: RateTable, k: int) -> np.ndarray:
    """Z = Hinv @ Q (d x r) for row k."""
    fr = table.frames
    r = int(fr.rank[k])
    Q4, _ = _factors_local(fr.y[k : k + 1], table.U_star[k : k + 1], fr.rank[k : k + 1])
    d = len(ctx.x_bar)
    Q = np.zeros((d, r))
    for c in range(4):
        if fr.pos[k, c] >= 0:
            Q[fr.pos[k, c]] = Q4[0, c, :r]
    return ctx.hinv @ Q


def _result_from_table(ctx, table: RateTable, k: int) -> FailurePointResult:
    r = int(table.rank[k])
    ok = np.isfinite(table.mu[k])
    res = FailurePointResult(
        line=int(table.lines[k]),
        theta_bar=float(table.theta_bar[k]),
        theta_max=float(table.theta_max[k]),
        rank=r,
        status=table.status[k],
        n_roots=int(table.n_roots[k]),
    )
    if ok:
        res.x_star = full_failure_point(ctx, table, k)
        res.u_star = table.U_star[k]
        res.mu_star = float(table.mu[k])
        res.alpha = float(table.alpha[k])
        res.beta = float(table.beta[k])
        res.A = table.A[k, :r, :r].copy()
        res.W = table.W[k, :r, :r].copy()
        res.grad_norm_s = float(table.grad_norm_s[k])
        res.energy_gap = float(table.energy_gap[k])
        res.pf0 = float(np.exp(table.log_pf0[k]))
        res.pf1 = float(np.exp(table.log_pf1[k]))
        res.ef = float(np.exp(table.log_ef[k]))
        res.lam = float(table.lam[k])
        res.log_lam = float(table.log_lam[k])
        res.second_order = table.second_order[k]
        res.second_order_exact = bool(table.second_order_exact[k])
        res.kkt_residual = kkt_residual(ctx, res)
    elif table.status[k] == "overtrip":
        res.lam = math.inf
        res.log_lam = math.inf
    return res


def kkt_residual(ctx: EquilibriumContext, res: FailurePointResult) -> float:
    """Max of the stationarity residual (scaled) and the surface residual at x*."""
    g = theta_gradient(ctx.network, res.line, res.x_star, ctx.y)
    st = ctx.hess @ (res.x_star - ctx.x_bar) - res.mu_star * g
    sc = max(1.0, float(np.max(np.abs(ctx.hess @ (res.x_star - ctx.x_bar)))))
    th = theta(ctx.network, res.line, res.x_star, ctx.y)
    return max(float(np.max(np.abs(st))) / sc, abs(th - res.theta_max) / res.theta_max)


def most_likely_failure_point(model_or_network, line: int, x_bar, y: DispatchPoint, context=None) -> FailurePointResult:
    """Solve the local optimality system for one line (rate fields are filled in as well)."""
    return failure_rate(model_or_network, line, x_bar, y, context=context)


def failure_rate(model_or_network, line: int, x_bar, y: DispatchPoint, context=None) -> FailurePointResult:
    model = model_or_network if isinstance(model_or_network, EnergyModel) else EnergyModel(model_or_network)
    ctx = context or EquilibriumContext.build(model.network, x_bar, y)
    table = failure_rates(model, x_bar, y, [line], context=ctx)
    res = _result_from_table(ctx, table, 0)
    if res.status == "no-root":
        raise FailurePointError(f"no admissible failure point found for line {line}")
    if res.status == "degenerate":
        raise DegenerateRate(f"alpha det(W) + beta <= 0 for line {line}")
    return res


def results_from_table(ctx: EquilibriumContext, table: RateTable) -> list[FailurePointResult]:
    return [_result_from_table(ctx, table, k) for k in range(len(table))]


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def dense_log_rate(model: EnergyModel, line: int, x_bar, y: DispatchPoint, x_star, mu, include_omega=False) -> dict:
    """Rate from the determinant formulas with dense d x d matrices (quadratic energy model).

    Uses grad H* = Hess (x* - x_bar), X = Hess - mu Hess(Theta)(x*) and adj(X) = det(X) inv(X).
    With ``include_omega`` the angular-velocity block (mass matrix, zero rows elsewhere) is
    appended to every matrix and vector.
    """
    network = model.network
    Hm = energy_hessian(network, x_bar, y)
    Ht = theta_hessian(network, line, x_star, y)
    delta = np.asarray(x_star) - np.asarray(x_bar)
    s = model.s_diag()
    if include_omega:
        m = model.mass[network.index.omega_gens]
        k = len(m)
        d = Hm.shape[0]
        Hm = np.block([[Hm, np.zeros((d, k))], [np.zeros((k, d)), np.diag(m)]])
        Ht = np.block([[Ht, np.zeros((d, k))], [np.zeros((k, d)), np.zeros((k, k))]])
        delta = np.concatenate([delta, np.zeros(k)])
        s = model.s_diag(include_omega=True)
    gH = Hm @ delta
    X = Hm - mu * Ht
    sgn_h, logdet_h = np.linalg.slogdet(Hm)
    sgn_x, logdet_x = np.linalg.slogdet(X)
    quad = gH @ np.linalg.solve(X, gH)
    # det(X) and the quadratic form may both be negative when X is indefinite
    log_c = logdet_x + np.log(abs(quad)) if sgn_x * quad > 0 else math.nan
    gap = 0.5 * delta @ Hm @ delta
    log_pf0 = np.log(np.sum(s * gH * gH)) + 0.5 * (logdet_h - np.log(2 * np.pi * model.tau) - log_c)
    log_pf1 = log_pf0 + np.log1p(model.tau / gap)
    log_ef = -gap / model.tau
    return dict(log_pf0=log_pf0, log_pf1=log_pf1, log_ef=log_ef, log_lam=log_pf1 + log_ef, log_c=log_c,
                logdet_h=logdet_h, logdet_x=logdet_x, sign_x=sgn_x, gap=gap)


def exact_failure_point(model: EnergyModel, line: int, x_bar, y: DispatchPoint, x0, mu0, tol=1e-11, max_iter=100):
    """Minimize the full energy on Theta = Theta_max by Newton's method on its KKT system."""
    network = model.network
    tmax = network.i_trip[line] ** 2
    x, mu = np.array(x0, dtype=float), float(mu0)
    d = len(x)

    def F(x, mu):
        g = energy_gradient(network, x, y)
        gt = theta_gradient(network, line, x, y)
        return np.concatenate([g - mu * gt, [(theta(network, line, x, y) - tmax) / tmax]])

    r = F(x, mu)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < tol:
            break
        gt = theta_gradient(network, line, x, y)
        J = np.zeros((d + 1, d + 1))
        J[:d, :d] = energy_hessian(network, x, y) - mu * theta_hessian(network, line, x, y)
        J[:d, d] = -gt
        J[d, :d] = gt / tmax
        step = np.linalg.solve(J, -r)
        t = 1.0
        f0 = r @ r
        while t > 1e-6:
            rn = F(x + t * step[:d], mu + t * step[d])
            if rn @ rn < (1 - 1e-4 * t) * f0:
                break
            t *= 0.5
        x, mu = x + t * step[:d], mu + t * step[d]
        r = F(x, mu)
    if np.max(np.abs(r)) >= 1e-8:
        raise FailurePointError(f"exact failure point did not converge for line {line}")
    return x, mu


def exact_log_rate(model: EnergyModel, line: int, x_bar, y: DispatchPoint, x_star, mu) -> dict:
    """Rate from the original determinant formulas evaluated with the full nonquadratic energy."""
    network = model.network
    H0 = energy_hessian(network, x_bar, y)
    Hs = energy_hessian(network, x_star, y)
    X = Hs - mu * theta_hessian(network, line, x_star, y)
    gH = energy_gradient(network, x_star, y)
    s = model.s_diag()
    _, logdet_h = np.linalg.slogdet(H0)
    sgn_x, logdet_x = np.linalg.slogdet(X)
    quad = gH @ np.linalg.solve(X, gH)
    log_c = logdet_x + np.log(abs(quad)) if sgn_x * quad > 0 else math.nan
    gap = energy(network, x_star, y) - energy(network, x_bar, y)
    log_pf0 = np.log(np.sum(s * gH * gH)) + 0.5 * (logdet_h - np.log(2 * np.pi * model.tau) - log_c)
    log_pf1 = log_pf0 + np.log1p(model.tau / gap)
    return dict(log_lam=log_pf1 - gap / model.tau, gap=gap, log_pf1=log_pf1, sign_x=sgn_x)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

REPORT_COLUMNS = (
    "line_id", "theta_bar", "utilization_pct", "mu_star", "energy_gap", "pf0", "pf1", "ef", "lambda", "second_order",
)


def utilization(network: Network, theta_values: np.ndarray, lines) -> np.ndarray:
    return 100.0 * np.sqrt(theta_values) / network.i_lim[np.asarray(lines)]


def rate_report_rows(network: Network, table: RateTable) -> list[list]:
    util = utilization(network, table.theta_bar, table.lines)
    rows = []
    for k in range(len(table)):
        rows.append([
            int(network.lines[table.lines[k]].label),
            f"{table.theta_bar[k]:.10e}",
            f"{util[k]:.6f}",
            f"{table.mu[k]:.10e}",
            f"{table.energy_gap[k]:.10e}",
            f"{math.exp(table.log_pf0[k]) if np.isfinite(table.log_pf0[k]) else math.nan:.10e}",
            f"{math.exp(table.log_pf1[k]) if np.isfinite(table.log_pf1[k]) else math.nan:.10e}",
            f"{math.exp(table.log_ef[k]) if np.isfinite(table.log_ef[k]) else math.nan:.10e}",
            f"{table.lam[k]:.10e}",
            table.second_order[k] if table.status[k] == "ok" else table.status[k],
        ])
    return rows


def write_rate_report(network: Network, table: RateTable, header_lines: list[str] | None = None) -> str:
    buf = io.StringIO()
    for h in header_lines or []:
        buf.write(f"# {h}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    w.writerows(rate_report_rows(network, table))
    return buf.getvalue()
