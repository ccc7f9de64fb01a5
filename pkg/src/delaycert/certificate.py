"""Certificate container and local closed-loop evaluation in error coordinates.

A certificate holds Lyapunov networks ``V`` keyed by group, optional neural
controllers keyed by class, coupling-gain rows keyed by class, and for every
agent the neighbor order (slot order) that aligns its row and controller
inputs with the shared parameters.

Local vectors use the canonical layout: slot 0 is the agent itself, then its
neighbors in slot order; within each slot lags 0..tau_max; the disturbance is
appended last when present. All states are errors ``x - x*``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError
from .neural import forward, init_mlp, lipschitz_upper


@dataclass(frozen=True)
class CertificateConstants:
    p: float = 1.01
    epsilon: float = 0.05
    psi: float = 0.1
    a1: float = 0.01
    a2: float = 10.0
    eps_p: float = 1e-3
    eps_d: float = 1e-6

    def __post_init__(self):
        if not self.p > 1:
            raise ConfigurationError("p must be > 1")
        if not 0 < self.epsilon < 1:
            raise ConfigurationError("epsilon must lie in (0, 1)")
        if self.psi < 0:
            raise ConfigurationError("psi must be nonnegative")
        if not 0 < self.a1 < self.a2:
            raise ConfigurationError("need 0 < a1 < a2")
        if self.eps_p < 0 or self.eps_d < 0:
            raise ConfigurationError("loss margins must be nonnegative")


def project_row(row, epsilon):
    """ReLU then scale by ``min(1, (1 - eps) / sum)``; zero rows stay zero."""
    r = np.maximum(np.asarray(row, dtype=np.float64), 0.0)
    s = r.sum()
    if s > 1.0 - epsilon:
        r = r * ((1.0 - epsilon) / s)
    return r


def project_row_backward(row, epsilon, grad_out):
    """Gradient w.r.t. the raw row given the gradient of the projected row."""
    row = np.asarray(row, dtype=np.float64)
    r = np.maximum(row, 0.0)
    s = r.sum()
    g = np.asarray(grad_out, dtype=np.float64)
    if s > 1.0 - epsilon:
        c = 1.0 - epsilon
        g = (c / s) * (g - np.dot(g, r) / s)
    return g * (row > 0.0)


def project_gains(gamma_pure, adjacency, epsilon):
    """Row-wise projection of a full N x N matrix masked by ``G + I``."""
    gp = np.asarray(gamma_pure, dtype=np.float64)
    mask = (np.asarray(adjacency) + np.eye(gp.shape[0])) > 0
    out = np.zeros_like(gp)
    for i in range(gp.shape[0]):
        out[i, mask[i]] = project_row(gp[i, mask[i]], epsilon)
    return out


@dataclass(frozen=True, eq=False)
class Certificate:
    constants: CertificateConstants
    v_nets: dict
    v_index: tuple
    pi_nets: dict
    pi_index: tuple
    gamma_rows: dict
    gamma_index: tuple
    slot_orders: tuple
    classes: object = None

    @property
    def n_agents(self):
        return len(self.v_index)

    def v_net(self, i):
        return self.v_nets[self.v_index[i]]

    def pi_net(self, i):
        key = self.pi_index[i]
        return None if key is None else self.pi_nets[key]

    def slots(self, i):
        return (i,) + tuple(self.slot_orders[i])

    def gamma_row(self, i):
        """Projected gains of agent ``i`` in slot order."""
        return project_row(self.gamma_rows[self.gamma_index[i]], self.constants.epsilon)

    def gamma_matrix(self):
        n = self.n_agents
        g = np.zeros((n, n))
        for i in range(n):
            g[i, list(self.slots(i))] = self.gamma_row(i)
        return g

    def v_lipschitz(self, method="norm-product"):
        return {k: lipschitz_upper(net, method=method).value for k, net in sorted(self.v_nets.items())}

    def pi_lipschitz(self, method="norm-product"):
        return {k: lipschitz_upper(net, method=method).value for k, net in sorted(self.pi_nets.items())}

    def controller(self, system, nominal):
        """Controller in raw coordinates for ``rollout``."""
        return CertificateController(self, system, nominal)

    def local_control(self, system, nominal, i, e_own, e_neighbors):
        """Control of agent ``i`` from error inputs in slot order."""
        net = self.pi_net(i)
        if net is None:
            order = self.slot_orders[i]
            natural = system.neighbors(i)
            by_agent = dict(zip(order, e_neighbors))
            return nominal.local(i, e_own, [by_agent[j] for j in natural])
        return forward(net, np.concatenate([e_own] + list(e_neighbors), axis=-1))


@dataclass(frozen=True, eq=False)
class CertificateController:
    cert: Certificate
    system: object
    nominal: object

    def __call__(self, i, own, neighbors):
        sysm = self.system
        e_own = np.asarray(own) - sysm.agents[i].equilibrium
        by_agent = {j: np.asarray(x) - sysm.agents[j].equilibrium for j, x in zip(sysm.neighbors(i), neighbors)}
        e_nbrs = [by_agent[j] for j in self.cert.slot_orders[i]]
        shape = np.broadcast_shapes(e_own.shape[:-1], *[e.shape[:-1] for e in e_nbrs])
        e_own = np.broadcast_to(e_own, shape + e_own.shape[-1:])
        e_nbrs = [np.broadcast_to(e, shape + e.shape[-1:]) for e in e_nbrs]
        return self.cert.local_control(sysm, self.nominal, i, e_own, e_nbrs)


def init_certificate(system, classes, constants, v_hidden=(64, 64, 64), pi_hidden=(64, 64, 64),
                     controller="neural", share=True, rng=None):
    """Fresh certificate with V(0) = 0 and pi(0) = 0 (zero biases).

    With ``share`` the V networks are keyed by dynamics label and controllers
    and gain rows by equivalence class; otherwise everything is per agent.
    """
    rng = np.random.default_rng(rng)
    n = system.n_agents
    v_index, pi_index, g_index = [], [], []
    for i in range(n):
        c = classes.class_of(i)
        label = system.agents[i].dynamics_label
        v_index.append(f"v:{label}" if share else f"v:{i}")
        pi_index.append(None if controller != "neural" else (f"pi:c{c}" if share else f"pi:{i}"))
        g_index.append(f"g:c{c}" if share else f"g:{i}")
    v_nets, pi_nets, gamma_rows = {}, {}, {}
    for i in range(n):
        a = system.agents[i]
        if v_index[i] not in v_nets:
            v_nets[v_index[i]] = init_mlp(a.state_dim, 1, v_hidden, rng)
        order = classes.slot_orders[i]
        if pi_index[i] is not None and pi_index[i] not in pi_nets:
            width = a.state_dim + sum(system.agents[j].state_dim for j in order)
            pi_nets[pi_index[i]] = init_mlp(width, a.input_dim, pi_hidden, rng)
        if g_index[i] not in gamma_rows:
            gamma_rows[g_index[i]] = np.full(1 + len(order), (1.0 - constants.epsilon) / (1 + len(order)))
    return Certificate(constants, v_nets, tuple(v_index), pi_nets, tuple(pi_index), gamma_rows,
                       tuple(g_index), tuple(tuple(o) for o in classes.slot_orders), classes)


# ------------------------------------------------------------------ layout

@dataclass(frozen=True)
class LocalLayout:
    """Index arithmetic for the canonical local vector of one agent."""

    agent: int
    slots: tuple
    dims: tuple
    tau: int
    dist_dim: int
    nbr_lags: tuple

    @staticmethod
    def build(system, cert_or_orders, i):
        order = cert_or_orders.slot_orders[i] if hasattr(cert_or_orders, "slot_orders") else cert_or_orders
        slots = (i,) + tuple(order)
        return LocalLayout(i, slots, tuple(system.agents[a].state_dim for a in slots), system.tau_max,
                           system.agents[i].dist_dim, tuple(int(system.delays[i, a]) for a in slots[1:]))

    @property
    def n_slots(self):
        return len(self.slots)

    def offset(self, q, s=0):
        return sum((self.tau + 1) * n for n in self.dims[:q]) + s * self.dims[q]

    def block(self, q, s):
        o = self.offset(q, s)
        return slice(o, o + self.dims[q])

    @property
    def hist_dim(self):
        return (self.tau + 1) * sum(self.dims)

    @property
    def z_dim(self):
        return self.hist_dim + self.dist_dim

    def d_slice(self):
        return slice(self.hist_dim, self.z_dim)


def closed_loop_next(system, cert, nominal, layout, hist, d, controls=None):
    """Next own error state of the layout agent and the control used.

    ``hist`` has shape ``(B, hist_dim)`` in error coordinates and neighbor
    states are taken at the agent's configured delays.
    """
    i = layout.agent
    e_own = hist[:, layout.block(0, 0)]
    e_nbrs = [hist[:, layout.block(q, s)] for q, s in zip(range(1, layout.n_slots), layout.nbr_lags)]
    if controls is None:
        controls = cert.local_control(system, nominal, i, e_own, e_nbrs)
    return dynamics_error(system, layout, e_own, controls, e_nbrs, d), controls


def dynamics_error(system, layout, e_own, u, e_nbrs, d):
    """``f_i`` evaluated around the equilibria, returned as an error."""
    i = layout.agent
    agent = system.agents[i]
    natural = system.neighbors(i)
    by_agent = {a: e + system.agents[a].equilibrium for a, e in zip(layout.slots[1:], e_nbrs)}
    raw_nbrs = [by_agent[j] for j in natural]
    return np.asarray(agent.dynamics(e_own + agent.equilibrium, u, raw_nbrs, d)) - agent.equilibrium


def input_jacobian(system, layout, e_own, u, e_nbrs, d, h=1e-6):
    """Central-difference Jacobian of ``f_i`` w.r.t. the control, ``(B, n, p)``."""
    p = u.shape[-1]
    cols = []
    for c in range(p):
        du = np.zeros(p)
        du[c] = h
        fp = dynamics_error(system, layout, e_own, u + du, e_nbrs, d)
        fm = dynamics_error(system, layout, e_own, u - du, e_nbrs, d)
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=-1)
