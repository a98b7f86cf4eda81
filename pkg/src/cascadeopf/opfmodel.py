"""JAX expressions of the ACOPF and of the per-line failure-rate constraint blocks.

Decision vector of the base problem::

    w = [V (all buses), theta (non-slack buses), p_g, q_g, (p_s, q_s when shedding)]

The slack angle is held at the case reference. For a rate-constrained line the block
of own variables is ``u = [x_star (d), mu (1), vec(Z) (d * r, column-major)]`` and its
constraint rows are

    Hess_x H(x, y) (x_star - x) - mu grad Theta(x_star, y) = 0      (d rows)
    Theta(x_star, y) - Theta_max = 0                               (1 row)
    Hess_x H(x, y) Z - Q(x_star, y) = 0                            (d * r rows)
    log-rate(x, y, x_star, mu, Z) - log(sqrt(2 pi tau) lambda_lim) <= 0
    second-order expression <= 1 - 1e-6

Energy and flows use line lists, so Hessian-vector products cost O(lines).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .energy import EnergyModel
from .failrate import line_frames
from .netmodel import Network

jax.config.update("jax_enable_x64", True)

SOSC_MARGIN = 1e-6
MU_FLOOR = 1e-12


@dataclass(frozen=True)
class Layout:
    n_bus: int
    n_ang: int
    n_gen: int
    shed: bool

    @property
    def v(self):
        return slice(0, self.n_bus)

    @property
    def th(self):
        return slice(self.n_bus, self.n_bus + self.n_ang)

    @property
    def p(self):
        o = self.n_bus + self.n_ang
        return slice(o, o + self.n_gen)

    @property
    def q(self):
        o = self.n_bus + self.n_ang + self.n_gen
        return slice(o, o + self.n_gen)

    @property
    def ps(self):
        o = self.n_bus + self.n_ang + 2 * self.n_gen
        return slice(o, o + (self.n_bus if self.shed else 0))

    @property
    def qs(self):
        o = self.n_bus + self.n_ang + 2 * self.n_gen + (self.n_bus if self.shed else 0)
        return slice(o, o + (self.n_bus if self.shed else 0))

    @property
    def n(self) -> int:
        return self.n_bus + self.n_ang + 2 * self.n_gen + (2 * self.n_bus if self.shed else 0)


class OpfModel:
    """Network-specific compiled functions for the ACOPF and the rate-constraint blocks."""

    def __init__(self, emodel: EnergyModel, shed: bool = False, phi: float = 1e6):
        net = emodel.network
        self.emodel = emodel
        self.network = net
        self.tau = emodel.tau
        self.shed = shed
        self.phi = phi
        idx = net.index
        self.layout = Layout(net.n_bus, idx.n_theta, net.n_gen, shed)
        self.d = idx.d_static
        self.slack_theta = float(net.buses[net.slack].theta_init)
        self._f = jnp.asarray(net.line_from)
        self._t = jnp.asarray(net.line_to)
        self._y = jnp.asarray(net.line_y)
        self._bsh = jnp.asarray(net.b_shunt)
        self._pd = jnp.asarray(net.p_d)
        self._qd = jnp.asarray(net.q_d)
        self._gbus = jnp.asarray(net.gen_bus)
        self._ang = jnp.asarray(idx.angle_buses)
        self._load = jnp.asarray(idx.load_buses)
        cost = np.array([g.cost for g in net.generators]).reshape(net.n_gen, 3)
        self._c2, self._c1, self._c0 = (jnp.asarray(cost[:, k]) for k in range(3))
        lim = np.isfinite(net.i_lim)
        self.limited = np.flatnonzero(lim)
        self._lim_f = jnp.asarray(net.line_from[lim])
        self._lim_t = jnp.asarray(net.line_to[lim])
        self._lim_y = jnp.asarray(net.line_y[lim])
        self.s_diag = jnp.asarray(emodel.s_diag())
        self.n_con0 = 2 * net.n_bus + len(self.limited)
        self._compile_base()
        self._blocks = {}

    # -- base expressions ---------------------------------------------------

    def unpack(self, w):
        L = self.layout
        V = w[L.v]
        th = jnp.full(L.n_bus, self.slack_theta).at[self._ang].set(w[L.th])
        return V, th, w[L.p], w[L.q]

    def objective_j(self, w):
        L = self.layout
        p = w[L.p]
        f = jnp.sum(self._c2 * p * p + self._c1 * p + self._c0)
        if self.shed:
            f = f + self.phi * (jnp.sum(w[L.ps] ** 2) + jnp.sum(w[L.qs] ** 2))
        return f

    def injections_j(self, V, th):
        f, t, y = self._f, self._t, self._y
        dth = th[f] - th[t]
        vv = V[f] * V[t]
        pft = y * vv * jnp.sin(dth)
        cft = y * vv * jnp.cos(dth)
        n = self.layout.n_bus
        P = jnp.zeros(n).at[f].add(pft).at[t].add(-pft)
        Qself = jnp.zeros(n).at[f].add(y).at[t].add(y) - self._bsh
        Q = Qself * V * V - jnp.zeros(n).at[f].add(cft).at[t].add(cft)
        return P, Q

    def balance_j(self, w):
        V, th, p, q = self.unpack(w)
        P, Q = self.injections_j(V, th)
        n = self.layout.n_bus
        pg = jnp.zeros(n).at[self._gbus].add(p)
        qg = jnp.zeros(n).at[self._gbus].add(q)
        pd, qd = self._pd, self._qd
        if self.shed:
            pd = pd - w[self.layout.ps]
            qd = qd - w[self.layout.qs]
        return jnp.concatenate([pd - pg + P, qd - qg + Q])

    def flows_j(self, w):
        V, th, _, _ = self.unpack(w)
        f, t, y = self._lim_f, self._lim_t, self._lim_y
        return y**2 * (V[f] ** 2 + V[t] ** 2 - 2 * V[f] * V[t] * jnp.cos(th[f] - th[t]))

    def cons0_j(self, w):
        return jnp.concatenate([self.balance_j(w), self.flows_j(w)])

    def x_of(self, w):
        L = self.layout
        return jnp.concatenate([w[L.v][self._load], w[L.th]])

    def energy_x(self, x, w):
        """Energy with the state components of w replaced by x."""
        L = self.layout
        nv = self.network.index.n_v
        V = w[L.v].at[self._load].set(x[:nv])
        th = jnp.full(L.n_bus, self.slack_theta).at[self._ang].set(x[nv:])
        p, q = w[L.p], w[L.q]
        n = L.n_bus
        pg = jnp.zeros(n).at[self._gbus].add(p)
        qg = jnp.zeros(n).at[self._gbus].add(q)
        f, t, y = self._f, self._t, self._y
        quad = jnp.sum(0.5 * y * (V[f] ** 2 + V[t] ** 2 - 2 * V[f] * V[t] * jnp.cos(th[f] - th[t])))
        quad = quad - 0.5 * jnp.sum(self._bsh * V * V)
        return quad + jnp.dot(self._pd - pg, th) + jnp.dot(self._qd - qg, jnp.log(V))

    def hvp_x(self, w, v):
        x = self.x_of(w)
        g = jax.grad(self.energy_x, argnums=0)
        return jax.jvp(lambda z: g(z, w), (x,), (v,))[1]

    def _compile_base(self):
        self.objective = jax.jit(self.objective_j)
        self.gradient = jax.jit(jax.grad(self.objective_j))
        self.cons0 = jax.jit(self.cons0_j)
        self.jac0 = jax.jit(jax.jacfwd(self.cons0_j))

        def lag0(w, sigma, lam):
            return sigma * self.objective_j(w) + jnp.dot(lam, self.cons0_j(w))

        self.hess0 = jax.jit(jax.hessian(lag0, argnums=0))

    # -- per-line block -------------------------------------------------------

    def line_params(self, line: int, lambda_lim: float) -> dict:
        fr = line_frames(self.network, [line])
        pos = np.where(fr.pos[0] >= 0, fr.pos[0], self.d)
        return dict(
            a=int(fr.a[0]), b=int(fr.b[0]), y=float(fr.y[0]), tmax=float(fr.theta_max[0]),
            pos=pos.astype(np.int64), log_lim=math.log(math.sqrt(2 * math.pi * self.tau) * lambda_lim),
            rank=int(fr.rank[0]),
        )

    def _local(self, xs, w, a, b):
        L = self.layout
        nv = self.network.index.n_v
        V = w[L.v].at[self._load].set(xs[:nv])
        th = jnp.full(L.n_bus, self.slack_theta).at[self._ang].set(xs[nv:])
        return V[a], V[b], th[a], th[b]

    def _scatter(self, loc, pos):
        # loc: (4,) or (4, r); pos == d marks dispatch coordinates, dropped here
        shape = (self.d + 1,) + loc.shape[1:]
        return jnp.zeros(shape).at[pos].add(loc)[: self.d]

    def line_terms(self, w, u, prm, r):
        """Equality rows, log-rate, second-order expression and auxiliary values."""
        d = self.d
        xs = u[:d]
        mu = u[d]
        Z = u[d + 1 :].reshape(r, d).T
        va, vb, ta, tb = self._local(xs, w, prm["a"], prm["b"])
        y = prm["y"]
        c, s = jnp.cos(ta - tb), jnp.sin(ta - tb)
        k = 2 * y * y
        g_loc = k * jnp.stack([va - vb * c, vb - va * c, va * vb * s, -va * vb * s])
        grad = self._scatter(g_loc, prm["pos"])
        theta_val = y * y * (va * va + vb * vb - 2 * va * vb * c)
        sq = math.sqrt(2.0) * y
        if r == 3:
            R = jnp.sqrt(va * va + vb * vb + va * vb * c)
            q_loc = sq * jnp.stack([
                jnp.stack([1.0, -c, vb * s, -vb * s]),
                jnp.stack([0.0 * c, s, va + vb * c, -va - vb * c]),
                jnp.stack([0.0 * c, 0.0 * c, R, -R]),
            ], axis=1)
            K = jnp.array([1.0, 1.0, -1.0])
        else:
            q_loc = sq * jnp.stack([
                jnp.stack([1.0 + 0.0 * c, 0.0 * c, vb * s, -vb * s]),
                jnp.stack([0.0 * c, 0.0 * c, 1.0 + 0.0 * c, -1.0 + 0.0 * c]),
            ], axis=1)
            K = jnp.stack([1.0 + 0.0 * c, va * vb * c - vb * vb * s * s])
        Q = self._scatter(q_loc, prm["pos"])
        x = self.x_of(w)
        delta = xs - x
        stat = self.hvp_x(w, delta) - mu * grad
        HZ = jnp.stack([self.hvp_x(w, Z[:, k_]) for k_ in range(r)], axis=1)
        zres = (HZ - Q).T.reshape(-1)
        eqs = jnp.concatenate([stat, jnp.array([theta_val - prm["tmax"]]), zres])
        A = K[:, None] * (Q.T @ Z)
        Wm = jnp.eye(r) - mu * A
        if r == 2:
            det_w = Wm[0, 0] * Wm[1, 1] - Wm[0, 1] * Wm[1, 0]
            adj_w = jnp.array([[Wm[1, 1], -Wm[0, 1]], [-Wm[1, 0], Wm[0, 0]]])
            sosc = mu * jnp.trace(A) - mu * mu * (A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0])
        else:
            r0, r1, r2 = Wm[0], Wm[1], Wm[2]
            c0, c1, c2 = jnp.cross(r1, r2), jnp.cross(r2, r0), jnp.cross(r0, r1)
            adj_w = jnp.stack([c0, c1, c2], axis=1)
            det_w = jnp.dot(r0, c0)
            # K = diag(1, 1, -1) is indefinite: trace relaxation
            sosc = mu * jnp.trace(A) / r
        alpha = jnp.dot(delta, grad)
        qd = Q.T @ delta
        beta = qd @ adj_w @ (K * qd)
        gs = jnp.sum(self.s_diag * grad * grad)
        tau = self.tau
        log_rate = (
            1.5 * jnp.log(mu) + jnp.log(gs) - 0.5 * jnp.log(alpha * det_w + beta)
            + jnp.log1p(2 * tau / (mu * alpha)) - mu * alpha / (2 * tau)
        )
        return eqs, log_rate, sosc, dict(alpha=alpha, beta=beta, det_w=det_w, A=A, gs=gs)

    def line_cons_j(self, w, u, prm, r):
        eqs, log_rate, sosc, _ = self.line_terms(w, u, prm, r)
        return jnp.concatenate([eqs, jnp.stack([log_rate - prm["log_lim"], sosc])])

    def block_funcs(self, r: int):
        if r in self._blocks:
            return self._blocks[r]
        nw = self.layout.n

        def cons(w, u, prm):
            return self.line_cons_j(w, u, prm, r)

        def lag(z, lam, prm):
            return jnp.dot(lam, cons(z[:nw], z[nw:], prm))

        def jac(w, u, prm):
            z = jnp.concatenate([w, u])
            J = jax.jacfwd(lambda zz: cons(zz[:nw], zz[nw:], prm))(z)
            return J[:, :nw], J[:, nw:]

        def hess(w, u, lam, prm):
            z = jnp.concatenate([w, u])
            return jax.hessian(lag, argnums=0)(z, lam, prm)

        funcs = dict(
            cons=jax.jit(cons),
            jac=jax.jit(jac),
            hess=jax.jit(hess),
            terms=jax.jit(lambda w, u, prm: self.line_terms(w, u, prm, r)),
        )
        self._blocks[r] = funcs
        return funcs

    def block_size(self, r: int) -> tuple[int, int]:
        d = self.d
        return d + 1 + d * r, d + 1 + d * r + 2

    @staticmethod
    def jax_params(prm: dict) -> dict:
        return {k: (jnp.asarray(v) if k != "rank" else v) for k, v in prm.items() if k != "rank"}
