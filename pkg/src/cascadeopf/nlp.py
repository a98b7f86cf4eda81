"""Primal-dual interior-point solver for smooth nonlinear programs.

    minimize f(x)  subject to  g_l <= g(x) <= g_u,  x_l <= x <= x_u

Rows with ``g_l == g_u`` are equalities; the others receive slack variables. The
method follows the usual barrier scheme: Newton steps on the perturbed KKT
conditions, a monotone barrier update, fraction-to-the-boundary step rules, a filter
line search and inertia correction of the KKT matrix.

The linear algebra exploits an optional block-arrow structure. Variables and
constraints are split into a global part and independent parts; a part's
constraints may involve the global variables and its own variables, and the
Lagrangian Hessian has no coupling between different parts. Each part's KKT block
is factorized on its own and eliminated into a dense Schur complement on the global
block. A problem without parts is simply solved densely.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import lapack

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max-iter"
NUMERIC_FAILURE = "numeric-failure"


# ---------------------------------------------------------------------------
# block containers
# ---------------------------------------------------------------------------


@dataclass
class BlockStructure:
    """Variable and constraint layout: global entries first, then each part contiguously."""

    n_global: int
    m_global: int
    var_sizes: list[int] = field(default_factory=list)
    con_sizes: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.var_sizes) != len(self.con_sizes):
            raise ValueError("each part needs both a variable and a constraint size")
        self.var_off = np.concatenate([[self.n_global], self.n_global + np.cumsum(self.var_sizes, dtype=int)]).astype(int)
        self.con_off = np.concatenate([[self.m_global], self.m_global + np.cumsum(self.con_sizes, dtype=int)]).astype(int)

    @property
    def n(self) -> int:
        return int(self.var_off[-1])

    @property
    def m(self) -> int:
        return int(self.con_off[-1])

    @property
    def n_parts(self) -> int:
        return len(self.var_sizes)

    def var_slice(self, k: int) -> slice:
        return slice(int(self.var_off[k]), int(self.var_off[k + 1]))

    def con_slice(self, k: int) -> slice:
        return slice(int(self.con_off[k]), int(self.con_off[k + 1]))


@dataclass
class BlockJacobian:
    """J0: global rows x global cols; parts[k] = (Jw, Ju): part rows x (global cols, own cols)."""

    J0: np.ndarray
    parts: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def matvec(self, st: BlockStructure, v: np.ndarray) -> np.ndarray:
        w = v[: st.n_global]
        out = [self.J0 @ w]
        for k, (Jw, Ju) in enumerate(self.parts):
            out.append(Jw @ w + Ju @ v[st.var_slice(k)])
        return np.concatenate(out) if out else np.zeros(0)

    def rmatvec(self, st: BlockStructure, lam: np.ndarray) -> np.ndarray:
        out = np.zeros(st.n)
        out[: st.n_global] = self.J0.T @ lam[: st.m_global]
        for k, (Jw, Ju) in enumerate(self.parts):
            lk = lam[st.con_slice(k)]
            out[: st.n_global] += Jw.T @ lk
            out[st.var_slice(k)] = Ju.T @ lk
        return out

    def to_dense(self, st: BlockStructure) -> np.ndarray:
        J = np.zeros((st.m, st.n))
        J[: st.m_global, : st.n_global] = self.J0
        for k, (Jw, Ju) in enumerate(self.parts):
            J[st.con_slice(k), : st.n_global] = Jw
            J[st.con_slice(k), st.var_slice(k)] = Ju
        return J


@dataclass
class BlockHessian:
    """Hww: global block; parts[k] = (Hwu, Huu) with Hwu of shape n_global x n_k."""

    Hww: np.ndarray
    parts: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def matvec(self, st: BlockStructure, v: np.ndarray) -> np.ndarray:
        w = v[: st.n_global]
        out = np.zeros(st.n)
        out[: st.n_global] = self.Hww @ w
        for k, (Hwu, Huu) in enumerate(self.parts):
            u = v[st.var_slice(k)]
            out[: st.n_global] += Hwu @ u
            out[st.var_slice(k)] = Hwu.T @ w + Huu @ u
        return out

    def to_dense(self, st: BlockStructure) -> np.ndarray:
        H = np.zeros((st.n, st.n))
        H[: st.n_global, : st.n_global] = self.Hww
        for k, (Hwu, Huu) in enumerate(self.parts):
            s = st.var_slice(k)
            H[: st.n_global, s] = Hwu
            H[s, : st.n_global] = Hwu.T
            H[s, s] = Huu
        return H


# ---------------------------------------------------------------------------
# problem / solution
# ---------------------------------------------------------------------------


@dataclass
class NlpProblem:
    """Callbacks and bounds of a nonlinear program.

    ``jacobian`` and ``hessian`` may return dense arrays (when ``structure`` is None)
    or :class:`BlockJacobian` / :class:`BlockHessian` matching ``structure``.
    ``hessian(x, sigma, lam)`` is the Hessian of ``sigma * f + lam @ g``.
    """

    n: int
    m: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    constraints: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable
    hessian: Callable
    x_l: np.ndarray
    x_u: np.ndarray
    g_l: np.ndarray
    g_u: np.ndarray
    x0: np.ndarray
    lam0: np.ndarray | None = None
    structure: BlockStructure | None = None
    var_names: list[str] | None = None

    def __post_init__(self):
        self.x_l = np.asarray(self.x_l, dtype=float)
        self.x_u = np.asarray(self.x_u, dtype=float)
        self.g_l = np.asarray(self.g_l, dtype=float)
        self.g_u = np.asarray(self.g_u, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        for name, arr, size in (("x_l", self.x_l, self.n), ("x_u", self.x_u, self.n), ("x0", self.x0, self.n),
                                ("g_l", self.g_l, self.m), ("g_u", self.g_u, self.m)):
            if arr.shape != (size,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({size},)")
        if np.any(self.x_l > self.x_u) or np.any(self.g_l > self.g_u):
            raise ValueError("inconsistent bounds")
        if self.structure is None:
            self.structure = BlockStructure(self.n, self.m)
        elif self.structure.n != self.n or self.structure.m != self.m:
            raise ValueError("block structure does not match problem dimensions")

    def block_jacobian(self, x) -> BlockJacobian:
        J = self.jacobian(x)
        return J if isinstance(J, BlockJacobian) else BlockJacobian(np.asarray(J, dtype=float).reshape(self.m, self.n))

    def block_hessian(self, x, sigma, lam) -> BlockHessian:
        H = self.hessian(x, sigma, lam)
        return H if isinstance(H, BlockHessian) else BlockHessian(np.asarray(H, dtype=float).reshape(self.n, self.n))


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 500
    mu_init: float = 0.1
    mu_min: float | None = None
    bound_push: float = 1e-2
    bound_frac: float = 1e-2
    tau_min: float = 0.99
    kappa_eps: float = 10.0
    kappa_mu: float = 0.1
    theta_mu: float = 1.5
    obj_scaling: bool = True
    max_grad: float = 100.0
    print_level: int = 0
    acceptable_tol: float = 1e-6
    acceptable_iter: int = 15
    time_limit: float = math.inf


@dataclass
class NlpSolution:
    x: np.ndarray
    lam: np.ndarray
    z_l: np.ndarray
    z_u: np.ndarray
    objective: float
    status: str
    iterations: int
    residuals: dict
    log: list = field(default_factory=list)
    message: str = ""
    wall_time: float = 0.0

    @property
    def success(self) -> bool:
        return self.status == OPTIMAL


LOG_COLUMNS = ("iter", "objective", "inf_pr", "inf_du", "mu", "alpha_pr", "alpha_du", "reg")


def write_iteration_log(sol: NlpSolution) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in sol.log:
        w.writerow([row[0]] + [f"{v:.10e}" for v in row[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# KKT linear algebra
# ---------------------------------------------------------------------------


def _sym_factor(M: np.ndarray, n_primal: int = 0, delta_w: float = 0.0):
    """Bunch-Kaufman factorization and inertia (n_pos, n_neg, n_zero).

    The zero-pivot threshold ignores the primal shift delta_w on the first
    n_primal diagonal entries; otherwise a large shift would grow the threshold
    while the constraint pivots shrink like 1/delta_w.
    """
    n = M.shape[0]
    if n == 0:
        return None, (0, 0, 0)
    lu, piv, info = lapack.dsytrf(M, lower=1)
    if info < 0:
        raise np.linalg.LinAlgError("dsytrf argument error")
    pos = neg = zero = 0
    # relative to a typical diagonal, so that a few huge barrier terms do not mask pivots
    diag = np.diag(M).copy()
    diag[:n_primal] -= delta_w
    scale = max(1.0, float(np.median(np.abs(diag))))
    k = 0
    while k < n:
        if piv[k] > 0:
            d = lu[k, k]
            if abs(d) <= 1e-13 * scale:
                zero += 1
            elif d > 0:
                pos += 1
            else:
                neg += 1
            k += 1
        else:
            a, b, c = lu[k, k], lu[k + 1, k], lu[k + 1, k + 1]
            ev = np.linalg.eigvalsh(np.array([[a, b], [b, c]]))
            for e in ev:
                if abs(e) <= 1e-13 * scale:
                    zero += 1
                elif e > 0:
                    pos += 1
                else:
                    neg += 1
            k += 2
    return (lu, piv), (pos, neg, zero)


def _sym_solve(fac, B: np.ndarray) -> np.ndarray:
    if fac is None:
        return np.zeros_like(B)
    lu, piv = fac
    X, info = lapack.dsytrs(lu, piv, B, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError("dsytrs failed")
    return X


class KKTSystem:
    """Block-arrow KKT matrix [[H + Sx + dw, J^T], [J, -Dc - dc]] with Schur elimination."""

    def __init__(self, st: BlockStructure, H: BlockHessian, J: BlockJacobian, sig_x: np.ndarray, d_c: np.ndarray):
        self.st = st
        self.H = H
        self.J = J
        self.sig_x = sig_x
        self.d_c = d_c

    def factor(self, delta_w: float, delta_c: float) -> tuple[int, int, int]:
        st = self.st
        n0, m0 = st.n_global, st.m_global
        inertia = np.zeros(3, dtype=int)
        M0 = np.zeros((n0 + m0, n0 + m0))
        M0[:n0, :n0] = self.H.Hww + np.diag(self.sig_x[:n0] + delta_w)
        M0[n0:, :n0] = self.J.J0
        M0[:n0, n0:] = self.J.J0.T
        M0[n0:, n0:] = -np.diag(self.d_c[:m0] + delta_c)
        self.part_facs = []
        for k in range(st.n_parts):
            Hwu, Huu = self.H.parts[k]
            Jw, Ju = self.J.parts[k]
            vs, cs = st.var_slice(k), st.con_slice(k)
            nk, mk = Huu.shape[0], Ju.shape[0]
            Mk = np.zeros((nk + mk, nk + mk))
            Mk[:nk, :nk] = Huu + np.diag(self.sig_x[vs] + delta_w)
            Mk[nk:, :nk] = Ju
            Mk[:nk, nk:] = Ju.T
            Mk[nk:, nk:] = -np.diag(self.d_c[cs] + delta_c)
            fac, ine = _sym_factor(Mk, nk, delta_w)
            inertia += ine
            # coupling rows of part k against the global variables
            Ck = np.vstack([Hwu.T, Jw])
            Yk = _sym_solve(fac, Ck)
            M0[:n0, :n0] -= Ck.T @ Yk
            self.part_facs.append((fac, Ck, nk))
        self.fac0, ine0 = _sym_factor(M0, n0, delta_w)
        inertia += ine0
        return tuple(int(v) for v in inertia)

    def solve(self, rx: np.ndarray, rc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Solve K [dx; dl] = [rx; rc]."""
        st = self.st
        n0, m0 = st.n_global, st.m_global
        r0 = np.concatenate([rx[:n0], rc[:m0]])
        ys = []
        for k, (fac, Ck, nk) in enumerate(self.part_facs):
            rk = np.concatenate([rx[st.var_slice(k)], rc[st.con_slice(k)]])
            yk = _sym_solve(fac, rk[:, None])[:, 0]
            ys.append(yk)
            r0[:n0] -= Ck.T @ yk
        d0 = _sym_solve(self.fac0, r0[:, None])[:, 0]
        dx = np.zeros(st.n)
        dl = np.zeros(st.m)
        dx[:n0] = d0[:n0]
        dl[:m0] = d0[n0:]
        for k, (fac, Ck, nk) in enumerate(self.part_facs):
            rk = np.concatenate([rx[st.var_slice(k)], rc[st.con_slice(k)]]) - Ck @ d0[:n0]
            zk = _sym_solve(fac, rk[:, None])[:, 0]
            dx[st.var_slice(k)] = zk[:nk]
            dl[st.con_slice(k)] = zk[nk:]
        return dx, dl


# ---------------------------------------------------------------------------
# residual certificate (independent of solver internals)
# ---------------------------------------------------------------------------


def kkt_residuals(problem: NlpProblem, x, lam, z_l, z_u) -> dict:
    """Stationarity, feasibility and complementarity of a primal-dual point.

    Sign conventions: grad f + J^T lam - z_l + z_u = 0 with z_l, z_u >= 0; lam_i > 0 only
    at an active upper constraint bound and lam_i < 0 only at an active lower one.
    """
    st = problem.structure
    gf = problem.gradient(x)
    J = problem.block_jacobian(x)
    g = problem.constraints(x)
    stat = gf + J.rmatvec(st, lam) - z_l + z_u
    eq = problem.g_l == problem.g_u
    feas_eq = np.abs(g - problem.g_l)[eq]
    viol = np.maximum(problem.g_l - g, g - problem.g_u)[~eq]
    bviol = np.maximum(problem.x_l - x, x - problem.x_u)
    lp = np.maximum(lam, 0.0)
    lm = np.maximum(-lam, 0.0)
    with np.errstate(invalid="ignore"):
        comp_c = np.where(eq, 0.0, np.maximum(np.nan_to_num(lp * (problem.g_u - g), nan=0.0, posinf=np.inf),
                                              np.nan_to_num(lm * (g - problem.g_l), nan=0.0, posinf=np.inf)))
        # a multiplier pushing against an infinite bound is a dual infeasibility
        comp_c = np.where(~eq & (lp > 0) & ~np.isfinite(problem.g_u), np.inf, comp_c)
        comp_c = np.where(~eq & (lm > 0) & ~np.isfinite(problem.g_l), np.inf, comp_c)
        comp_l = np.where(np.isfinite(problem.x_l), z_l * (x - problem.x_l), np.where(z_l > 0, np.inf, 0.0))
        comp_u = np.where(np.isfinite(problem.x_u), z_u * (problem.x_u - x), np.where(z_u > 0, np.inf, 0.0))
    dual_sign = min(float(np.min(z_l, initial=0.0)), float(np.min(z_u, initial=0.0)))

    def mx(a):
        return float(np.max(np.abs(a))) if np.size(a) else 0.0

    return {
        "stationarity": mx(stat),
        "equality": mx(feas_eq),
        "inequality": float(max(np.max(viol, initial=0.0), 0.0)),
        "bounds": float(max(np.max(bviol, initial=0.0), 0.0)),
        "complementarity": max(mx(comp_c), mx(comp_l), mx(comp_u)),
        "dual_sign": -dual_sign,
    }


def certificate_ok(res: dict, tol: float = 1e-6, ineq_tol: float = 1e-8) -> bool:
    return (
        res["stationarity"] < tol
        and res["equality"] < tol
        and res["inequality"] <= ineq_tol
        and res["bounds"] <= ineq_tol
        and res["complementarity"] < tol
        and res["dual_sign"] <= 0.0
    )


# ---------------------------------------------------------------------------
# scaling wrapper
# ---------------------------------------------------------------------------


class _Scaled:
    """Objective factor and per-row constraint factors applied to the user callbacks."""

    def __init__(self, p: NlpProblem, obj_scale: float, con_scale: np.ndarray):
        self.p = p
        self.st = p.structure
        self.of = obj_scale
        self.cs = con_scale

    def f(self, x):
        return self.of * self.p.objective(x)

    def grad(self, x):
        return self.of * self.p.gradient(x)

    def g(self, x):
        return self.cs * self.p.constraints(x)

    def jac(self, x) -> BlockJacobian:
        J = self.p.block_jacobian(x)
        st = self.st
        cs = self.cs
        parts = [(cs[st.con_slice(k), None] * Jw, cs[st.con_slice(k), None] * Ju) for k, (Jw, Ju) in enumerate(J.parts)]
        return BlockJacobian(cs[: st.m_global, None] * J.J0, parts)

    def hess(self, x, sigma, lam) -> BlockHessian:
        return self.p.block_hessian(x, sigma * self.of, lam * self.cs)


def _gradient_scaling(p: NlpProblem, x0, max_grad):
    gf = p.gradient(x0)
    n = float(np.max(np.abs(gf))) if gf.size else 0.0
    obj = min(1.0, max_grad / n) if n > 0 else 1.0
    J = p.block_jacobian(x0)
    st = p.structure
    rowmax = np.zeros(p.m)
    if st.m_global:
        rowmax[: st.m_global] = np.max(np.abs(J.J0), axis=1, initial=0.0)
    for k, (Jw, Ju) in enumerate(J.parts):
        rowmax[st.con_slice(k)] = np.maximum(np.max(np.abs(Jw), axis=1, initial=0.0), np.max(np.abs(Ju), axis=1, initial=0.0))
    cs = np.where(rowmax > max_grad, max_grad / np.where(rowmax > 0, rowmax, 1.0), 1.0)
    return obj, cs


# ---------------------------------------------------------------------------
# interior-point method
# ---------------------------------------------------------------------------


def _push_into_bounds(x, lo, hi, k1, k2):
    with np.errstate(invalid="ignore"):
        return _push(x, lo, hi, k1, k2)


def _push(x, lo, hi, k1, k2):
    finite_l, finite_u = np.isfinite(lo), np.isfinite(hi)
    span = np.where(finite_l & finite_u, hi - lo, np.inf)
    pl = np.minimum(k1 * np.maximum(1.0, np.abs(lo)), k2 * span)
    pu = np.minimum(k1 * np.maximum(1.0, np.abs(hi)), k2 * span)
    lo_p = np.where(finite_l, lo + pl, -np.inf)
    hi_p = np.where(finite_u, hi - pu, np.inf)
    both = finite_l & finite_u & (lo_p > hi_p)
    mid = 0.5 * (lo + hi)
    x = np.where(x < lo_p, lo_p, x)
    x = np.where(x > hi_p, hi_p, x)
    x = np.where(both, mid, x)
    return x


def _ftb(v, dv, lo, hi, tau):
    """Largest step in (0, 1] keeping v + a dv at least a (1 - tau) fraction away from bounds."""
    a = 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.isfinite(lo) & (dv < 0)
        if m.any():
            a = min(a, float(np.min(-tau * (v[m] - lo[m]) / dv[m])))
        m = np.isfinite(hi) & (dv > 0)
        if m.any():
            a = min(a, float(np.min(tau * (hi[m] - v[m]) / dv[m])))
    return max(a, 0.0)


def _ftb_pos(z, dz, tau):
    m = dz < 0
    if not m.any():
        return 1.0
    return min(1.0, float(np.min(-tau * z[m] / dz[m])))


def solve(problem: NlpProblem, options: SolverOptions | None = None, z_l0=None, z_u0=None) -> NlpSolution:
    """Solve the NLP; the returned multipliers refer to the unscaled problem."""
    opt = options or SolverOptions()
    t_start = time.perf_counter()
    p = problem
    st = p.structure
    n, m = p.n, p.m
    x_l, x_u, g_l, g_u = p.x_l, p.x_u, p.g_l, p.g_u
    # fixed variables are held at their value and kept out of the Newton system
    fixed = np.isfinite(x_l) & (x_l == x_u)

    x = _push_into_bounds(p.x0, x_l, x_u, opt.bound_push, opt.bound_frac)
    x[fixed] = x_l[fixed]
    if opt.obj_scaling:
        of, cs = _gradient_scaling(p, x, opt.max_grad)
    else:
        of, cs = 1.0, np.ones(m)
    S = _Scaled(p, of, cs)
    gl_s, gu_s = g_l * cs, g_u * cs

    eq = g_l == g_u
    ineq = ~eq
    iidx = np.flatnonzero(ineq)
    s_l, s_u = gl_s[ineq], gu_s[ineq]
    has_xl, has_xu = np.isfinite(x_l) & ~fixed, np.isfinite(x_u) & ~fixed
    has_sl, has_su = np.isfinite(s_l), np.isfinite(s_u)

    mu = opt.mu_init
    tol = opt.tol
    mu_min = opt.mu_min if opt.mu_min is not None else tol / 10.0

    g = S.g(x)
    s = _push_into_bounds(g[ineq], s_l, s_u, opt.bound_push, opt.bound_frac)
    lam = np.zeros(m) if p.lam0 is None else np.asarray(p.lam0, float) / cs
    z_l = np.where(has_xl, 1.0, 0.0) if z_l0 is None else np.where(has_xl, np.maximum(np.asarray(z_l0) * of, 1e-12), 0.0)
    z_u = np.where(has_xu, 1.0, 0.0) if z_u0 is None else np.where(has_xu, np.maximum(np.asarray(z_u0) * of, 1e-12), 0.0)
    # slack bound multipliers consistent with the constraint multipliers when warm-started
    li = lam[ineq]
    v_l = np.where(has_sl, np.maximum(-li, 0.0) + mu, 0.0) if p.lam0 is not None else np.where(has_sl, 1.0, 0.0)
    v_u = np.where(has_su, np.maximum(li, 0.0) + mu, 0.0) if p.lam0 is not None else np.where(has_su, 1.0, 0.0)

    def slacks(xv, sv):
        dxl = np.where(has_xl, xv - x_l, 1.0)
        dxu = np.where(has_xu, x_u - xv, 1.0)
        dsl = np.where(has_sl, sv - s_l, 1.0)
        dsu = np.where(has_su, s_u - sv, 1.0)
        return dxl, dxu, dsl, dsu

    def barrier_obj(fv, xv, sv):
        dxl, dxu, dsl, dsu = slacks(xv, sv)
        if np.any(dxl <= 0) or np.any(dxu <= 0) or np.any(dsl <= 0) or np.any(dsu <= 0):
            return math.inf
        return fv - mu * (np.sum(np.log(dxl[has_xl])) + np.sum(np.log(dxu[has_xu]))
                          + np.sum(np.log(dsl[has_sl])) + np.sum(np.log(dsu[has_su])))

    def constr_viol(gv, sv):
        r = gv.copy()
        r[eq] -= gl_s[eq]
        r[ineq] -= sv
        return float(np.sum(np.abs(r))), r

    def evaluate(xv):
        fv = S.f(xv)
        gv = S.g(xv)
        return fv, gv

    f, g = evaluate(x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        return _finish(p, x, lam, z_l, z_u, of, cs, f, NUMERIC_FAILURE, 0, [], "non-finite values at the starting point", t_start)
    gf = S.grad(x)
    J = S.jac(x)

    log = []
    theta0 = constr_viol(g, s)[0]
    theta_max = 1e4 * max(1.0, theta0)
    theta_min = 1e-4 * max(1.0, theta0)
    filt: list[tuple[float, float]] = []
    delta_w_last = 0.0
    status = MAX_ITER
    message = ""
    acceptable_count = 0
    it = 0
    alpha_pr = alpha_du = 0.0
    reg_used = 0.0

    def errors(mu_val):
        dxl, dxu, dsl, dsu = slacks(x, s)
        rx = np.where(fixed, 0.0, gf + J.rmatvec(st, lam) - z_l + z_u)
        rs = -lam[ineq] - v_l + v_u
        _, rc = constr_viol(g, s)
        s_max = 100.0
        n_mult = m + np.sum(has_xl) + np.sum(has_xu) + np.sum(has_sl) + np.sum(has_su)
        sum_mult = np.sum(np.abs(lam)) + np.sum(z_l) + np.sum(z_u) + np.sum(v_l) + np.sum(v_u)
        s_d = max(s_max, sum_mult / max(n_mult, 1)) / s_max
        nz = np.sum(z_l) + np.sum(z_u) + np.sum(v_l) + np.sum(v_u)
        s_c = max(s_max, nz / max(np.sum(has_xl) + np.sum(has_xu) + np.sum(has_sl) + np.sum(has_su), 1)) / s_max
        comp = np.concatenate([
            (dxl * z_l - mu_val)[has_xl], (dxu * z_u - mu_val)[has_xu],
            (dsl * v_l - mu_val)[has_sl], (dsu * v_u - mu_val)[has_su],
        ])
        dual = max(float(np.max(np.abs(rx), initial=0.0)), float(np.max(np.abs(rs), initial=0.0)))
        primal = float(np.max(np.abs(rc), initial=0.0))
        c_err = float(np.max(np.abs(comp), initial=0.0))
        return max(dual / s_d, primal, c_err / s_c), dual, primal

    for it in range(opt.max_iter + 1):
        e0, inf_du, inf_pr = errors(0.0)
        log.append((it, f / of, inf_pr, inf_du, mu, alpha_pr, alpha_du, reg_used))
        if opt.print_level:
            print(f"{it:4d} {f / of: .8e} {inf_pr:.2e} {inf_du:.2e} {mu:.1e} {alpha_pr:.2e} {alpha_du:.2e} {reg_used:.1e}")
        if e0 <= tol:
            status = OPTIMAL
            break
        if e0 <= opt.acceptable_tol:
            acceptable_count += 1
            if acceptable_count >= opt.acceptable_iter:
                status = OPTIMAL
                message = "acceptable level reached"
                break
        else:
            acceptable_count = 0
        if it == opt.max_iter:
            status = MAX_ITER
            break
        if time.perf_counter() - t_start > opt.time_limit:
            status = MAX_ITER
            message = "time limit"
            break
        # barrier update
        while True:
            e_mu, _, _ = errors(mu)
            if e_mu > opt.kappa_eps * mu or mu <= mu_min:
                break
            mu = max(mu_min, min(opt.kappa_mu * mu, mu**opt.theta_mu))
            filt = []
        tau = max(opt.tau_min, 1.0 - mu)

        dxl, dxu, dsl, dsu = slacks(x, s)
        sig_x = np.where(has_xl, z_l / dxl, 0.0) + np.where(has_xu, z_u / dxu, 0.0)
        sig_s = np.where(has_sl, v_l / dsl, 0.0) + np.where(has_su, v_u / dsu, 0.0)
        # barrier gradients
        gphi_x = gf - np.where(has_xl, mu / dxl, 0.0) + np.where(has_xu, mu / dxu, 0.0)
        gphi_s = -np.where(has_sl, mu / dsl, 0.0) + np.where(has_su, mu / dsu, 0.0)
        r_s = -lam[ineq] + gphi_s  # gradient of the barrier Lagrangian w.r.t. s
        d_c = np.zeros(m)
        sig_s_safe = np.where(sig_s > 0, sig_s, 1e-20)
        d_c[iidx] = 1.0 / sig_s_safe
        Hl = S.hess(x, 1.0, lam)
        if fixed.any():
            Hl, Jk = _without_fixed(st, Hl, J, fixed)
        else:
            Jk = J
        kkt = KKTSystem(st, Hl, Jk, sig_x, d_c)

        _, rc = constr_viol(g, s)
        rhs_x = -(gphi_x + J.rmatvec(st, lam))
        rhs_x[fixed] = 0.0
        rhs_c = -rc
        rhs_c[iidx] -= r_s / sig_s_safe

        delta_w, delta_c = 0.0, 0.0
        ok = False
        for attempt in range(60):
            try:
                inertia = kkt.factor(delta_w, delta_c)
            except np.linalg.LinAlgError:
                inertia = (0, 0, n + m)
            if opt.print_level > 2:
                print("inertia", attempt, delta_w, delta_c, inertia, (n, m))
            if inertia == (n, m, 0):
                ok = True
                break
            if inertia[2] > 0 and delta_c == 0.0:
                delta_c = 1e-8 * mu**0.25
            if delta_w == 0.0:
                delta_w = 1e-4 if delta_w_last == 0.0 else max(1e-20, delta_w_last / 3.0)
            else:
                delta_w *= 100.0 if delta_w_last == 0.0 else 8.0
            if delta_w > 1e40:
                break
        if not ok:
            status = NUMERIC_FAILURE
            message = "could not obtain a KKT factorization with correct inertia"
            break
        if delta_w > 0:
            delta_w_last = delta_w
        reg_used = delta_w
        dx, dl = kkt.solve(rhs_x, rhs_c)
        ds = (dl[iidx] - r_s) / sig_s_safe
        dzl = np.where(has_xl, (mu - z_l * dxl - z_l * dx) / dxl, 0.0)
        dzu = np.where(has_xu, (mu - z_u * dxu + z_u * dx) / dxu, 0.0)
        dvl = np.where(has_sl, (mu - v_l * dsl - v_l * ds) / dsl, 0.0)
        dvu = np.where(has_su, (mu - v_u * dsu + v_u * ds) / dsu, 0.0)

        a_max = min(_ftb(x, dx, x_l, x_u, tau), _ftb(s, ds, s_l, s_u, tau))
        a_z = min(_ftb_pos(z_l[has_xl], dzl[has_xl], tau), _ftb_pos(z_u[has_xu], dzu[has_xu], tau),
                  _ftb_pos(v_l[has_sl], dvl[has_sl], tau), _ftb_pos(v_u[has_su], dvu[has_su], tau))

        # filter line search
        phi = barrier_obj(f, x, s)
        theta, _ = constr_viol(g, s)
        dphi = float(gphi_x @ dx + gphi_s @ ds)
        alpha = a_max
        accepted = False
        gamma_t, gamma_p, s_phi, s_t, delta_sw, eta = 1e-5, 1e-8, 2.3, 1.1, 1.0, 1e-4
        alpha_min = 0.05 * gamma_t * (min(gamma_t, gamma_p * theta / (-dphi)) if dphi < 0 else 1.0)
        alpha_min = max(alpha_min, 1e-14)
        while alpha >= alpha_min:
            xt = x + alpha * dx
            stt = s + alpha * ds
            try:
                ft, gt = evaluate(xt)
            except (FloatingPointError, ValueError, ArithmeticError):
                ft, gt = math.nan, None
            if gt is None or not np.isfinite(ft) or not np.all(np.isfinite(gt)):
                alpha *= 0.5
                continue
            phit = barrier_obj(ft, xt, stt)
            thetat, _ = constr_viol(gt, stt)
            if not np.isfinite(phit) or thetat > theta_max:
                alpha *= 0.5
                continue
            if any(thetat >= tf and phit >= pf for tf, pf in filt):
                alpha *= 0.5
                continue
            switching = dphi < 0 and alpha * (-dphi) ** s_phi > delta_sw * theta**s_t
            if theta <= theta_min and switching:
                if phit <= phi + eta * alpha * dphi:
                    accepted = True
                    f_type = False
                    break
            elif thetat <= (1 - gamma_t) * theta or phit <= phi - gamma_p * theta:
                accepted = True
                f_type = True
                break
            alpha *= 0.5
        if not accepted:
            # fall back: accept the shortest step that reduces infeasibility, otherwise fail
            alpha = a_max
            while alpha > 1e-10:
                xt, stt = x + alpha * dx, s + alpha * ds
                try:
                    ft, gt = evaluate(xt)
                except (FloatingPointError, ValueError, ArithmeticError):
                    gt = None
                if gt is not None and np.isfinite(ft) and np.all(np.isfinite(gt)) and np.isfinite(barrier_obj(ft, xt, stt)):
                    thetat, _ = constr_viol(gt, stt)
                    if thetat < theta or (theta < 1e-10 and thetat < 1e-8):
                        accepted = True
                        f_type = True
                        filt = []
                        break
                alpha *= 0.5
        if not accepted:
            status = INFEASIBLE if theta > 1e-6 else NUMERIC_FAILURE
            message = f"line search failed at iteration {it}"
            break
        if f_type:
            filt.append(((1 - gamma_t) * theta, phi - gamma_p * theta))
        alpha_pr, alpha_du = alpha, a_z
        x, s = xt, stt
        lam = lam + alpha * dl
        z_l = z_l + a_z * dzl
        z_u = z_u + a_z * dzu
        v_l = v_l + a_z * dvl
        v_u = v_u + a_z * dvu
        # keep bound multipliers within a factor of the primal-dual centrality
        k_sig = 1e10
        dxl, dxu, dsl, dsu = slacks(x, s)
        z_l = np.where(has_xl, np.clip(z_l, mu / (k_sig * dxl), k_sig * mu / dxl), 0.0)
        z_u = np.where(has_xu, np.clip(z_u, mu / (k_sig * dxu), k_sig * mu / dxu), 0.0)
        v_l = np.where(has_sl, np.clip(v_l, mu / (k_sig * dsl), k_sig * mu / dsl), 0.0)
        v_u = np.where(has_su, np.clip(v_u, mu / (k_sig * dsu), k_sig * mu / dsu), 0.0)
        f, g = ft, gt
        gf = S.grad(x)
        J = S.jac(x)

    return _finish(p, x, lam, z_l, z_u, of, cs, f / of, status, it, log, message, t_start)


def _without_fixed(st: BlockStructure, H: BlockHessian, J: BlockJacobian, fixed: np.ndarray):
    """Copies of H and J in which fixed variables decouple (unit diagonal, zero columns)."""
    f0 = fixed[: st.n_global]
    Hww = H.Hww.copy()
    Hww[f0, :] = 0.0
    Hww[:, f0] = 0.0
    Hww[f0, f0] = 1.0
    J0 = J.J0.copy()
    J0[:, f0] = 0.0
    hp, jp = [], []
    for k, ((Hwu, Huu), (Jw, Ju)) in enumerate(zip(H.parts, J.parts)):
        fk = fixed[st.var_slice(k)]
        Hwu, Huu, Jw, Ju = Hwu.copy(), Huu.copy(), Jw.copy(), Ju.copy()
        Hwu[f0, :] = 0.0
        Hwu[:, fk] = 0.0
        Huu[fk, :] = 0.0
        Huu[:, fk] = 0.0
        Huu[fk, fk] = 1.0
        Jw[:, f0] = 0.0
        Ju[:, fk] = 0.0
        hp.append((Hwu, Huu))
        jp.append((Jw, Ju))
    return BlockHessian(Hww, hp), BlockJacobian(J0, jp)


def _finish(p, x, lam, z_l, z_u, of, cs, fval, status, it, log, message, t_start):
    lam_u = lam * cs / of
    zl_u = z_l / of
    zu_u = z_u / of
    fixed = np.isfinite(p.x_l) & (p.x_l == p.x_u)
    if fixed.any() and np.all(np.isfinite(x)):
        # bound multipliers of fixed variables from stationarity
        r = p.gradient(x) + p.block_jacobian(x).rmatvec(p.structure, lam_u)
        zl_u = np.where(fixed, np.maximum(r, 0.0), zl_u)
        zu_u = np.where(fixed, np.maximum(-r, 0.0), zu_u)
    res = kkt_residuals(p, x, lam_u, zl_u, zu_u)
    return NlpSolution(
        x=x, lam=lam_u, z_l=zl_u, z_u=zu_u, objective=float(p.objective(x)), status=status, iterations=it,
        residuals=res, log=log, message=message, wall_time=time.perf_counter() - t_start,
    )


# ---------------------------------------------------------------------------
# derivative checker
# ---------------------------------------------------------------------------


@dataclass
class DerivativeReport:
    gradient_error: float
    gradient_index: int
    jacobian_error: float
    jacobian_index: tuple[int, int]
    hessian_error: float
    hessian_index: tuple[int, int]

    @property
    def max_error(self) -> float:
        return max(self.gradient_error, self.jacobian_error, self.hessian_error)


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.abs(b))


def check_derivatives(problem: NlpProblem, x, h: float = 1e-6, seed: int = 0) -> DerivativeReport:
    """Compare callback derivatives against central finite differences at x."""
    p = problem
    st = p.structure
    x = np.asarray(x, dtype=float)
    n = p.n
    rng = np.random.default_rng(seed)
    lam = rng.standard_normal(p.m)
    sigma = 1.0
    E = np.eye(n)
    g_fd = np.array([(p.objective(x + h * E[i]) - p.objective(x - h * E[i])) / (2 * h) for i in range(n)])
    J_fd = np.array([(p.constraints(x + h * E[i]) - p.constraints(x - h * E[i])) / (2 * h) for i in range(n)]).T
    J_fd = J_fd.reshape(p.m, n)

    def lag_grad(z):
        return sigma * p.gradient(z) + p.block_jacobian(z).rmatvec(st, lam)

    hh = max(h, 1e-5)
    H_fd = np.array([(lag_grad(x + hh * E[i]) - lag_grad(x - hh * E[i])) / (2 * hh) for i in range(n)]).T
    g = p.gradient(x)
    J = p.block_jacobian(x).to_dense(st)
    H = p.block_hessian(x, sigma, lam).to_dense(st)
    eg = _rel_err(g, g_fd) if n else np.zeros(0)
    ej = _rel_err(J, J_fd)
    eh = _rel_err(H, H_fd)

    def argmax(e):
        if e.size == 0:
            return 0.0, (0, 0) if e.ndim == 2 else 0
        k = int(np.argmax(e))
        return float(e.flat[k]), (np.unravel_index(k, e.shape) if e.ndim == 2 else k)

    ge, gi = argmax(eg)
    je, ji = argmax(ej)
    he, hi = argmax(eh)
    ji = tuple(int(v) for v in ji) if isinstance(ji, tuple) else (0, 0)
    hi = tuple(int(v) for v in hi) if isinstance(hi, tuple) else (0, 0)
    return DerivativeReport(ge, int(gi) if not isinstance(gi, tuple) else 0, je, ji, he, hi)
