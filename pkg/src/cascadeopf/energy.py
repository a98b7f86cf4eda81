"""Energy function of the lossless network, its derivatives, power flow and equilibria.

The static state vector ``x`` stacks the load-bus voltage magnitudes followed by the
non-slack angles (see :class:`~cascadeopf.netmodel.StateIndexMap`). Generator angular
velocities are carried by :class:`SystemState` but fixed to zero in every static
computation, so the array form of ``x`` used throughout the package leaves them out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor

from .netmodel import Network

DEFAULT_DG = 0.05
DEFAULT_DL = 0.005
DEFAULT_DV = 0.01
DEFAULT_TAU = 1e-4


class NoConvergence(RuntimeError):
    """Newton iteration failed; carries the last iterate and its mismatch norm."""

    def __init__(self, message: str, x: np.ndarray | None = None, mismatch: float = np.inf):
        super().__init__(message)
        self.x = x
        self.mismatch = mismatch


class UnstableEquilibrium(RuntimeError):
    """Power flow converged but the energy Hessian is not positive definite."""

    def __init__(self, message: str, x: np.ndarray | None = None):
        super().__init__(message)
        self.x = x


@dataclass(frozen=True)
class DispatchPoint:
    """Operator controls: generator-bus voltages, slack angle and generations."""

    v_gen: np.ndarray
    theta_slack: float
    p_g: np.ndarray
    q_g: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.v_gen) <= 0):
            raise ValueError("generator-bus voltages must be positive")

    @classmethod
    def from_case(cls, network: Network) -> DispatchPoint:
        v_gen = np.array([network.generators[network.gens_at_bus[b][0]].v_set for b in network.gen_buses])
        p = np.array([g.p_init for g in network.generators])
        q = np.array([g.q_init for g in network.generators])
        return cls(v_gen, float(network.buses[network.slack].theta_init), p, q)

    def check(self, network: Network) -> None:
        if len(self.v_gen) != len(network.gen_buses) or len(self.p_g) != network.n_gen or len(self.q_g) != network.n_gen:
            raise ValueError("dispatch point dimensions do not match the network")


@dataclass(frozen=True)
class SystemState:
    """Dependent variables: load-bus voltages, non-slack angles and angular velocities."""

    v_load: np.ndarray
    theta: np.ndarray
    omega: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.v_load, self.theta])

    @classmethod
    def from_vector(cls, network: Network, x: np.ndarray, omega=None) -> SystemState:
        nv = network.index.n_v
        om = np.zeros(network.index.n_omega) if omega is None else np.asarray(omega, float)
        return cls(np.array(x[:nv]), np.array(x[nv:]), om)

    @classmethod
    def flat(cls, network: Network) -> SystemState:
        idx = network.index
        return cls(np.ones(idx.n_v), np.zeros(idx.n_theta), np.zeros(idx.n_omega))


def _vec(x) -> np.ndarray:
    return x.vector if isinstance(x, SystemState) else np.asarray(x, dtype=float)


@dataclass(frozen=True)
class EnergyModel:
    """Dynamic parameters entering the failure rates: masses, damping and noise level."""

    network: Network
    mass: np.ndarray | None = None
    d_g: float = DEFAULT_DG
    d_l: float = DEFAULT_DL
    d_v: float = DEFAULT_DV
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.mass is None:
            object.__setattr__(self, "mass", np.array([g.mass for g in self.network.generators]))
        if np.any(self.mass <= 0) or min(self.d_g, self.d_l, self.d_v, self.tau) <= 0:
            raise ValueError("masses, damping constants and tau must be positive")

    def s_diag(self, include_omega: bool = False) -> np.ndarray:
        idx = self.network.index
        parts = [np.full(idx.n_v, 1.0 / self.d_v), np.full(idx.n_theta, 1.0 / self.d_l)]
        if include_omega:
            m = self.mass[idx.omega_gens]
            parts.append(self.d_g / m**2)
        return np.concatenate(parts)

    def mass_matrix(self) -> np.ndarray:
        return np.diag(self.mass[self.network.index.omega_gens])


def full_voltages(network: Network, x, y: DispatchPoint) -> tuple[np.ndarray, np.ndarray]:
    """Bus voltage magnitudes and angles assembled from x and y."""
    x = _vec(x)
    idx = network.index
    V = np.empty(network.n_bus)
    V[network.gen_buses] = y.v_gen
    V[idx.load_buses] = x[: idx.n_v]
    th = np.empty(network.n_bus)
    th[network.slack] = y.theta_slack
    th[idx.angle_buses] = x[idx.n_v :]
    return V, th


def net_injections(network: Network, y: DispatchPoint) -> tuple[np.ndarray, np.ndarray]:
    """Net demand p_net = p_d - sum p_g and q_net per bus."""
    cg = network.gen_incidence
    return network.p_d - cg @ y.p_g, network.q_d - cg @ y.q_g


def power_injections(network: Network, V: np.ndarray, th: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Active and reactive power injected into the network at each bus."""
    dth = th[:, None] - th[None, :]
    B = network.B
    P = V * ((B * np.sin(dth)) @ V)
    Q = -V * ((B * np.cos(dth)) @ V)
    return P, Q


def mismatch(network: Network, x, y: DispatchPoint) -> tuple[np.ndarray, np.ndarray]:
    """Active and reactive balance residuals at every bus (zero at a power-flow solution)."""
    V, th = full_voltages(network, x, y)
    P, Q = power_injections(network, V, th)
    pn, qn = net_injections(network, y)
    return pn + P, qn + Q


def energy(network: Network, x, y: DispatchPoint) -> float:
    """Energy function H(x, y); includes the kinetic term when x carries nonzero omega."""
    V, th = full_voltages(network, x, y)
    if np.any(V <= 0):
        raise ValueError("energy undefined for nonpositive voltage magnitudes")
    pn, qn = net_injections(network, y)
    dth = th[:, None] - th[None, :]
    h = -0.5 * V @ ((network.B * np.cos(dth)) @ V) + pn @ th + qn @ np.log(V)
    if isinstance(x, SystemState) and x.omega.size:
        m = network.index.omega_gens
        mass = np.array([network.generators[k].mass for k in m])
        h += 0.5 * float(np.sum(mass * x.omega**2))
    return float(h)


def _bus_gradient(network, V, th, pn, qn):
    dth = th[:, None] - th[None, :]
    B = network.B
    g_th = pn + V * ((B * np.sin(dth)) @ V)
    g_v = qn / V - (B * np.cos(dth)) @ V
    return g_v, g_th


def energy_gradient(network: Network, x, y: DispatchPoint, include_omega: bool = False) -> np.ndarray:
    V, th = full_voltages(network, x, y)
    pn, qn = net_injections(network, y)
    g_v, g_th = _bus_gradient(network, V, th, pn, qn)
    idx = network.index
    g = np.concatenate([g_v[idx.load_buses], g_th[idx.angle_buses]])
    if include_omega:
        om = x.omega if isinstance(x, SystemState) and x.omega.size else np.zeros(idx.n_omega)
        mass = np.array([network.generators[k].mass for k in idx.omega_gens])
        g = np.concatenate([g, mass * om])
    return g


def bus_hessian(network: Network, V: np.ndarray, th: np.ndarray, qn: np.ndarray) -> np.ndarray:
    """Hessian of H in the full bus coordinates (V_1..V_n, theta_1..theta_n)."""
    n = network.n_bus
    B = network.B
    dth = th[:, None] - th[None, :]
    Bc = B * np.cos(dth)
    Bs = B * np.sin(dth)
    off = ~np.eye(n, dtype=bool)
    hvv = -Bc.copy()
    hvv[np.diag_indices(n)] = -np.diag(B) - qn / V**2
    vv = V[:, None] * V[None, :]
    htt = -Bc * vv
    htt[np.diag_indices(n)] = np.sum(np.where(off, Bc * vv, 0.0), axis=1)
    # row theta_i, column V_k
    htv = Bs * V[:, None]
    htv[np.diag_indices(n)] = np.sum(np.where(off, Bs, 0.0) * V[None, :], axis=1)
    Hb = np.empty((2 * n, 2 * n))
    Hb[:n, :n] = hvv
    Hb[n:, n:] = htt
    Hb[n:, :n] = htv
    Hb[:n, n:] = htv.T
    return Hb


def state_positions(network: Network) -> np.ndarray:
    """Positions of the static x components within the bus coordinates (V..., theta...)."""
    idx = network.index
    return np.concatenate([idx.load_buses, network.n_bus + idx.angle_buses])


def energy_hessian(network: Network, x, y: DispatchPoint, include_omega: bool = False) -> np.ndarray:
    V, th = full_voltages(network, x, y)
    _, qn = net_injections(network, y)
    pos = state_positions(network)
    H = bus_hessian(network, V, th, qn)[np.ix_(pos, pos)]
    if include_omega:
        idx = network.index
        mass = np.array([network.generators[k].mass for k in idx.omega_gens])
        d = H.shape[0]
        Hf = np.zeros((d + len(mass), d + len(mass)))
        Hf[:d, :d] = H
        Hf[d:, d:] = np.diag(mass)
        H = Hf
    return H


def balance_dispatch(network: Network, x, y: DispatchPoint) -> DispatchPoint:
    """Absorb the residual generation: slack active power and generator-bus reactive power.

    Generators sharing a bus split the reactive residual evenly.
    """
    V, th = full_voltages(network, x, y)
    P, Q = power_injections(network, V, th)
    p = np.array(y.p_g, dtype=float)
    q = np.array(y.q_g, dtype=float)
    cg = network.gen_incidence
    # reactive: q_g total at bus must equal Q_i + q_d
    q_bus = cg @ q
    target = Q + network.q_d
    for b in network.gen_buses:
        gens = network.gens_at_bus[b]
        q[list(gens)] += (target[b] - q_bus[b]) / len(gens)
    s = network.slack
    sg = network.slack_generator
    p[sg] += P[s] + network.p_d[s] - (cg @ p)[s]
    return DispatchPoint(np.array(y.v_gen), y.theta_slack, p, q)


def solve_power_flow(
    network: Network,
    y: DispatchPoint,
    x0=None,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> np.ndarray:
    """Newton's method on grad_x H = 0, i.e. the lossless balance equations at the x buses.

    Returns the static state vector. The generator-bus reactive balance and the slack
    active balance are not constrained here; :func:`balance_dispatch` closes them.
    """
    idx = network.index
    x = np.concatenate([np.ones(idx.n_v), np.zeros(idx.n_theta)]) if x0 is None else _vec(x0).copy()
    if np.any(x[: idx.n_v] <= 0):
        raise ValueError("initial load voltages must be positive")
    if x.size == 0:
        return x
    nv = idx.n_v

    def scaled(z, g):
        # voltage rows scaled back to reactive power mismatches
        out = g.copy()
        out[:nv] *= z[:nv]
        return np.linalg.norm(out, np.inf)

    g = energy_gradient(network, x, y)
    fn = scaled(x, g)
    for it in range(max_iter):
        if fn < tol:
            return x
        Hm = energy_hessian(network, x, y)
        try:
            dx = -np.linalg.solve(Hm, g)
        except np.linalg.LinAlgError:
            raise NoConvergence("singular Jacobian in power flow", x, fn) from None
        if not np.all(np.isfinite(dx)):
            raise NoConvergence("non-finite Newton step in power flow", x, fn)
        # keep voltages positive
        step = 1.0
        neg = dx[:nv] < 0
        if np.any(neg):
            step = min(1.0, 0.9 * float(np.min(-x[:nv][neg] / dx[:nv][neg])))
        f2 = 0.5 * float(g @ g)
        for _ in range(40):
            xn = x + step * dx
            gn = energy_gradient(network, xn, y)
            if np.all(np.isfinite(gn)) and 0.5 * float(gn @ gn) <= (1 - 1e-4 * step) * f2:
                break
            step *= 0.5
        else:
            raise NoConvergence(f"line search failed at iteration {it}", x, fn)
        x, g = xn, gn
        fn = scaled(x, g)
    if fn < tol:
        return x
    raise NoConvergence(f"power flow did not converge in {max_iter} iterations (mismatch {fn:.3e})", x, fn)


def is_positive_definite(Hm: np.ndarray) -> bool:
    if Hm.size == 0:
        return True
    try:
        cho_factor(Hm)
        return True
    except LinAlgError:
        return False


def find_equilibrium(network: Network, y: DispatchPoint, x0=None, **kw) -> np.ndarray:
    """Stable equilibrium x_bar(y): a power-flow solution with positive definite energy Hessian."""
    x = solve_power_flow(network, y, x0, **kw)
    if not is_positive_definite(energy_hessian(network, x, y)):
        raise UnstableEquilibrium("energy Hessian is not positive definite at the power-flow solution", x)
    return x
