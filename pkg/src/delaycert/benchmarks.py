"""Benchmark environments: mixed-autonomy platoon, drone formation, microgrid,
and a generic linear network used for small test systems.

Each builder returns an ``Environment`` bundling the system, a linear nominal
feedback law, the initial box, and a tracking-error map for RMSE.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .system import AgentSpec, InterconnectedSystem, InterconnectionGraph

log = logging.getLogger(__name__)


# ----------------------------------------------------------------- topologies

def chain_adjacency(n, bidirectional=True):
    """Agent ``i`` hears ``i-1`` (and ``i+1`` when bidirectional)."""
    g = np.zeros((n, n), dtype=np.int64)
    for i in range(1, n):
        g[i, i - 1] = 1
        if bidirectional:
            g[i - 1, i] = 1
    return g


def ring_adjacency(n, bidirectional=False):
    """Agent ``i`` hears ``i-1 mod n``."""
    g = np.zeros((n, n), dtype=np.int64)
    if n < 2:
        return g
    for i in range(n):
        g[i, (i - 1) % n] = 1
        if bidirectional:
            g[i, (i + 1) % n] = 1
    np.fill_diagonal(g, 0)
    return g


def star_adjacency(n_leaves, bidirectional=False):
    """Hub 0 broadcasts to leaves ``1..n_leaves``."""
    n = n_leaves + 1
    g = np.zeros((n, n), dtype=np.int64)
    g[1:, 0] = 1
    if bidirectional:
        g[0, 1:] = 1
    return g


def tree_adjacency(parents, bidirectional=True):
    """``parents[i]`` is the parent of node ``i`` (-1 for the root)."""
    n = len(parents)
    g = np.zeros((n, n), dtype=np.int64)
    for i, p in enumerate(parents):
        if p >= 0:
            g[i, p] = 1
            if bidirectional:
                g[p, i] = 1
    return g


def directional_delays(adjacency, ahead=1, behind=1):
    """Delay ``ahead`` for edges from lower-index agents, ``behind`` otherwise."""
    g = np.asarray(adjacency)
    tau = np.zeros_like(g)
    for i, j in np.argwhere(g == 1):
        tau[i, j] = ahead if j < i else behind
    return tau


def build_topology(kind, n, tau=1, bidirectional=None, adjacency=None, ahead=None, behind=None):
    """Adjacency and delay bounds for a named topology."""
    if kind == "chain":
        g = chain_adjacency(n, True if bidirectional is None else bidirectional)
    elif kind == "ring":
        g = ring_adjacency(n, bool(bidirectional))
    elif kind == "star":
        g = star_adjacency(n - 1, bool(bidirectional))
    elif kind == "custom":
        if adjacency is None:
            raise ConfigurationError("custom topology needs an adjacency matrix")
        g = np.asarray(adjacency, dtype=np.int64)
    else:
        raise ConfigurationError(f"unknown topology {kind!r}")
    if ahead is not None or behind is not None:
        tau_m = directional_delays(g, ahead or tau, behind or tau)
    else:
        tau_m = g * int(tau)
    return g, tau_m


def abs_jacobian_norm(j_upper):
    """Spectral norm of an elementwise upper bound on ``|J|``.

    ``||J||_2 <= || |J| ||_2 <= ||B||_2`` whenever ``|J| <= B`` entrywise, so
    this is a sound Lipschitz constant over any set where the bound holds.
    """
    return float(np.linalg.norm(np.abs(np.asarray(j_upper, dtype=np.float64)), 2))


# -------------------------------------------------------------- nominal laws

@dataclass(frozen=True, eq=False)
class LinearFeedback:
    """Nominal law ``u_i = K_i [x_i - x_i*, x_j - x_j* (delayed neighbors)]``.

    ``gains[i]`` has shape ``(p_i, n_i + sum_j n_j)``.
    """

    system: object
    gains: tuple

    def __post_init__(self):
        for i, (k, agent) in enumerate(zip(self.gains, self.system.agents)):
            width = agent.state_dim + sum(self.system.agents[j].state_dim for j in self.system.neighbors(i))
            if k is None:
                raise ConfigurationError(f"agent {i}: missing nominal gains")
            if np.shape(k) != (agent.input_dim, width):
                raise ConfigurationError(f"agent {i}: gain shape {np.shape(k)} != {(agent.input_dim, width)}")
        object.__setattr__(self, "gains", tuple(np.asarray(k, dtype=np.float64) for k in self.gains))

    def error_input(self, i, own, neighbors):
        sysm = self.system
        parts = [np.asarray(own) - sysm.agents[i].equilibrium]
        for j, x in zip(sysm.neighbors(i), neighbors):
            parts.append(np.asarray(x) - sysm.agents[j].equilibrium)
        shape = np.broadcast_shapes(*[p.shape[:-1] for p in parts])
        return np.concatenate([np.broadcast_to(p, shape + p.shape[-1:]) for p in parts], axis=-1)

    def __call__(self, i, own, neighbors):
        return self.error_input(i, own, neighbors) @ self.gains[i].T

    def local(self, i, e_own, e_neighbors):
        """Same law in error coordinates."""
        z = np.concatenate([e_own] + list(e_neighbors), axis=-1)
        return z @ self.gains[i].T

    def lipschitz(self, i):
        return float(np.linalg.norm(self.gains[i], 2))


@dataclass(frozen=True, eq=False)
class Environment:
    name: str
    system: InterconnectedSystem
    nominal: LinearFeedback
    initial_box: tuple  # per agent (n_i, 2) boxes in raw coordinates
    params: object = None
    error_fn: object = None  # states -> tracking errors (defaults to x - x*)

    def tracking_errors(self, states):
        if self.error_fn is not None:
            return self.error_fn(states)
        return [np.asarray(x) - a.equilibrium for x, a in zip(states, self.system.agents)]


def _initial_boxes(system, half_widths):
    hw = np.asarray(half_widths, dtype=np.float64)
    boxes = []
    for a in system.agents:
        w = np.broadcast_to(hw, (a.state_dim,)) if hw.ndim <= 1 and hw.size in (1, a.state_dim) else hw
        boxes.append(np.stack([a.equilibrium - w, a.equilibrium + w], axis=1))
    return tuple(boxes)


def resolve_initial_box(system, box):
    """``box`` is a half-width (scalar or per coordinate) or per-coordinate
    ``[lo, hi]`` offsets from each agent's equilibrium."""
    arr = np.asarray(box, dtype=np.float64)
    if arr.ndim == 2:
        boxes = []
        for a in system.agents:
            if arr.shape != (a.state_dim, 2):
                raise ConfigurationError(f"initial box shape {arr.shape} != {(a.state_dim, 2)}")
            if np.any(arr[:, 0] > arr[:, 1]):
                raise ConfigurationError("initial box has lo > hi")
            boxes.append(a.equilibrium[:, None] + arr)
        return tuple(boxes)
    if np.any(arr < 0):
        raise ConfigurationError("initial half-widths must be nonnegative")
    return _initial_boxes(system, arr)


# ------------------------------------------------------------------- platoon

@dataclass(frozen=True)
class PlatoonParams:
    n_vehicles: int = 10
    sampling_period: float = 0.1
    hdv_set: tuple = ()
    ovm_gain: float = 0.6
    v_max: float = 30.0
    s_center: float = 20.0
    s_width: float = 10.0
    v_eq: float = 15.0
    gains: tuple = (0.1, 0.5, 0.2)
    dist_bound: float = 0.3
    tau: int = 1
    initial_half_width: tuple = (2.0, 1.0)

    def __post_init__(self):
        if self.sampling_period <= 0:
            raise ConfigurationError("sampling_period must be positive")
        if any(not 0 <= h < self.n_vehicles for h in self.hdv_set):
            raise ConfigurationError("hdv_set indices out of range")
        if not 0 < self.v_eq < self.v_max:
            raise ConfigurationError("v_eq must lie strictly inside (0, v_max)")

    @property
    def cav_set(self):
        return tuple(i for i in range(self.n_vehicles) if i not in self.hdv_set)

    @property
    def s_eq(self):
        return ovm_spacing(self, self.v_eq)


def ovm_speed(params, s):
    """Saturated tanh desired-speed profile, ranging over (0, v_max)."""
    return 0.5 * params.v_max * (1.0 + np.tanh((np.asarray(s) - params.s_center) / params.s_width))


def ovm_spacing(params, v):
    """Inverse of ``ovm_speed``."""
    return params.s_center + params.s_width * np.arctanh(2.0 * v / params.v_max - 1.0)


def platoon_step(params, state, u, v_prev, d, hdv=False):
    """Longitudinal update ``s' = s + T(v_prev - v)``, ``v' = v + T a + d``.

    ``a`` is ``u`` for CAVs and the OVM law for HDVs (``u`` ignored).
    """
    state = np.asarray(state, dtype=np.float64)
    s, v = state[..., 0], state[..., 1]
    T = params.sampling_period
    if hdv:
        acc = params.ovm_gain * (ovm_speed(params, s) - v)
    else:
        acc = np.asarray(u, dtype=np.float64)[..., 0]
    d = np.asarray(d, dtype=np.float64)[..., 0]
    s_next = s + T * (np.asarray(v_prev) - v)
    v_next = v + T * acc + d
    if np.any(s_next < 0):
        log.debug("negative spacing in platoon step")
    return np.stack(np.broadcast_arrays(s_next, v_next), axis=-1)


def platoon_nominal(params, state, v_pred):
    """``u = -k_s (s - s*) - k_v (v - v*) + k_p (v_pred - v)``."""
    k_s, k_v, k_p = params.gains
    state = np.asarray(state, dtype=np.float64)
    return (-k_s * (state[..., 0] - params.s_eq) - k_v * (state[..., 1] - params.v_eq)
            + k_p * (np.asarray(v_pred) - state[..., 1]))[..., None]


def platoon_lipschitz(params, hdv, head):
    T = params.sampling_period
    a = params.ovm_gain
    dv = params.v_max / (2.0 * params.s_width)  # sup |V'(s)|
    # columns: s, v, u, [s_prev, v_prev], d
    row_s = [1.0, T, 0.0] + ([] if head else [0.0, T]) + [0.0]
    if hdv:
        row_v = [T * a * dv, abs(1.0 - T * a), 0.0] + ([] if head else [0.0, 0.0]) + [1.0]
    else:
        row_v = [0.0, 1.0, T] + ([] if head else [0.0, 0.0]) + [1.0]
    return abs_jacobian_norm([row_s, row_v])


def make_platoon(params=PlatoonParams(), tau=None):
    """Predecessor-following platoon; vehicle 0 follows a virtual leader at v*."""
    tau = params.tau if tau is None else tau
    n = params.n_vehicles
    g = chain_adjacency(n, bidirectional=False)
    graph = InterconnectionGraph.uniform(g, tau)
    eq = np.array([params.s_eq, params.v_eq])
    box = [[-params.dist_bound, params.dist_bound]]
    agents = []
    for i in range(n):
        hdv = i in params.hdv_set
        head = i == 0

        def dyn(x, u, nbrs, d, hdv=hdv):
            v_prev = nbrs[0][..., 1] if nbrs else params.v_eq
            return platoon_step(params, x, u, v_prev, d, hdv=hdv)

        label = ("hdv" if hdv else "cav") + ("-head" if head else "")
        agents.append(AgentSpec(2, 1, dyn, box, label, platoon_lipschitz(params, hdv, head), eq))
    system = InterconnectedSystem(graph, tuple(agents))
    k_s, k_v, k_p = params.gains
    gains = []
    for i in range(n):
        if i in params.hdv_set:
            gains.append(np.zeros((1, 2 if i == 0 else 4)))
        elif i == 0:
            gains.append(np.array([[-k_s, -(k_v + k_p)]]))
        else:
            gains.append(np.array([[-k_s, -(k_v + k_p), 0.0, k_p]]))
    nominal = LinearFeedback(system, tuple(gains))
    return Environment("platoon", system, nominal, _initial_boxes(system, params.initial_half_width), params)


# --------------------------------------------------------------------- drone

def _default_offsets(n):
    return tuple((-2.0 * (i + 1), 0.0, 0.0) for i in range(n))


@dataclass(frozen=True)
class DroneParams:
    n_followers: int = 4
    sampling_period: float = 0.1
    offsets: tuple = None
    turn_rate: float = 0.1
    leader_speed: float = 1.0
    kp: float = 1.0
    kv: float = 1.5
    topology: str = "predecessor"
    dist_bound: float = 0.3
    tau: int = 1
    initial_half_width: tuple = (0.5, 0.5, 0.5, 0.2, 0.2, 0.2)

    def __post_init__(self):
        if self.sampling_period <= 0:
            raise ConfigurationError("sampling_period must be positive")
        if self.offsets is None:
            object.__setattr__(self, "offsets", _default_offsets(self.n_followers))
        offs = np.asarray(self.offsets, dtype=np.float64)
        if offs.shape != (self.n_followers, 3):
            raise ConfigurationError("need one 3-D offset per follower")
        if len({tuple(o) for o in offs}) != len(offs):
            raise ConfigurationError("formation offsets must be distinct")
        if self.topology not in ("predecessor", "leader"):
            raise ConfigurationError("drone topology must be 'predecessor' or 'leader'")


def drone_step(params, state, u, d):
    """Double integrator ``p' = p + T v``, ``v' = v + T u + d``."""
    state = np.asarray(state, dtype=np.float64)
    T = params.sampling_period
    p, v = state[..., :3], state[..., 3:]
    return np.concatenate([p + T * v, v + T * np.asarray(u) + np.asarray(d)], axis=-1)


leader_step = drone_step


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def leader_reference_gain(params):
    """Input map ``u = (Rz(w T) - I) v / T`` rotating the leader velocity.

    Under ``v' = v + T u`` this gives ``v' = Rz v``: constant speed on a circle.
    """
    T = params.sampling_period
    return (rotation_z(params.turn_rate * T) - np.eye(3)) / T


def make_drone(params=DroneParams(), tau=None):
    """Leader is agent 0; followers ``1..N_f`` track a reference agent."""
    tau = params.tau if tau is None else tau
    n = params.n_followers + 1
    g = np.zeros((n, n), dtype=np.int64)
    for i in range(1, n):
        g[i, i - 1 if params.topology == "predecessor" else 0] = 1
    graph = InterconnectionGraph.uniform(g, tau)
    box = [[-params.dist_bound, params.dist_bound]] * 3
    T = params.sampling_period
    lip_leader = abs_jacobian_norm(np.block([[np.eye(3), T * np.eye(3), np.zeros((3, 3)), np.zeros((3, 3))],
                                             [np.zeros((3, 3)), np.eye(3), T * np.eye(3), np.eye(3)]]))
    lip_follower = abs_jacobian_norm(np.block([
        [np.eye(3), T * np.eye(3), np.zeros((3, 3)), np.zeros((3, 6)), np.zeros((3, 3))],
        [np.zeros((3, 3)), np.eye(3), T * np.eye(3), np.zeros((3, 6)), np.eye(3)]]))
    offs = np.asarray(params.offsets, dtype=np.float64)

    def dyn(x, u, nbrs, d):
        return drone_step(params, x, u, d)

    agents = [AgentSpec(6, 3, dyn, box, "drone-leader", lip_leader, np.zeros(6))]
    for i in range(1, n):
        agents.append(AgentSpec(6, 3, dyn, box, "drone-follower", lip_follower,
                                np.concatenate([offs[i - 1], np.zeros(3)])))
    system = InterconnectedSystem(graph, tuple(agents))
    kp, kv = params.kp, params.kv
    gains = [np.hstack([np.zeros((3, 3)), leader_reference_gain(params)])]
    for i in range(1, n):
        own = np.hstack([-kp * np.eye(3), -kv * np.eye(3)])
        gains.append(np.hstack([own, -own]))
    nominal = LinearFeedback(system, tuple(gains))

    def errors(states):
        lead = np.asarray(states[0])
        out = [np.zeros_like(lead)]
        for i in range(1, n):
            ref = lead + agents[i].equilibrium
            out.append(np.asarray(states[i]) - ref)
        return out

    return Environment("drone", system, nominal, _initial_boxes(system, params.initial_half_width), params, errors)


# ----------------------------------------------------------------- microgrid

@dataclass(frozen=True)
class MicrogridParams:
    n_inverters: int = 6
    sampling_period: float = 0.01
    susceptance: float = 1.0
    loads: float = 0.2
    droop: float = 0.5
    time_constant: float = 0.1
    omega_nominal: float = 0.0
    voltage: float = 1.0
    k_omega: float = 1.0
    k_xi: float = 0.2
    dist_bound: float = 1.0
    tau: int = 1
    initial_half_width: tuple = (0.1, 0.5, 0.1)

    def __post_init__(self):
        if self.time_constant <= 0 or self.droop <= 0:
            raise ConfigurationError("time constants and droop gains must be positive")
        if self.voltage <= 0:
            raise ConfigurationError("voltages must be positive")

    def load(self, i):
        return float(np.broadcast_to(np.asarray(self.loads, dtype=np.float64), (self.n_inverters,))[i])

    def setpoint(self, i):
        return self.load(i)

    def b(self, i, j):
        b = np.asarray(self.susceptance, dtype=np.float64)
        return float(abs(b[i, j])) if b.ndim == 2 else float(abs(b))


def microgrid_power(params, angles, voltages, i, neighbors):
    """``P_i = P_L,i + sum_j |B_ij| U_i U_j sin(delta_i - delta_j)``."""
    angles = np.asarray(angles, dtype=np.float64)
    voltages = np.broadcast_to(np.asarray(voltages, dtype=np.float64), angles.shape)
    p = params.load(i)
    for j in neighbors:
        p = p + params.b(i, j) * voltages[..., i] * voltages[..., j] * np.sin(angles[..., i] - angles[..., j])
    return p


def microgrid_step(params, i, x, u, neighbor_states, neighbor_ids, d):
    """Frequency and secondary-control update for inverter ``i``."""
    x = np.asarray(x, dtype=np.float64)
    delta, omega, xi = x[..., 0], x[..., 1], x[..., 2]
    T, tau = params.sampling_period, params.time_constant
    U = params.voltage
    p = params.load(i)
    for j, xj in zip(neighbor_ids, neighbor_states):
        p = p + params.b(i, j) * U * U * np.sin(delta - np.asarray(xj)[..., 0])
    d = np.asarray(d, dtype=np.float64)[..., 0]
    u = np.asarray(u, dtype=np.float64)[..., 0]
    d_next = delta + T * omega
    w_next = omega + (T / tau) * (-(omega - params.omega_nominal) - params.droop * (p - params.setpoint(i)) + xi) + d
    x_next = xi + T * u
    return np.stack(np.broadcast_arrays(d_next, w_next, x_next), axis=-1)


def microgrid_lipschitz(params, i, neighbor_ids):
    T, tau, eta, U = params.sampling_period, params.time_constant, params.droop, params.voltage
    g = T / tau
    alphas = [params.b(i, j) * U * U for j in neighbor_ids]
    row_d = [1.0, T, 0.0, 0.0] + [0.0] * (3 * len(alphas)) + [0.0]
    row_w = [g * eta * sum(alphas), abs(1.0 - g), g, 0.0]
    for a in alphas:
        row_w += [g * eta * a, 0.0, 0.0]
    row_w += [1.0]
    row_x = [0.0, 0.0, 1.0, T] + [0.0] * (3 * len(alphas)) + [0.0]
    return abs_jacobian_norm([row_d, row_w, row_x])


def make_microgrid(params=MicrogridParams(), tau=None, adjacency=None):
    """Radial network (a bidirectional chain unless an adjacency is given)."""
    tau = params.tau if tau is None else tau
    n = params.n_inverters
    g = chain_adjacency(n) if adjacency is None else np.asarray(adjacency, dtype=np.int64)
    if not _is_tree(g):
        raise ConfigurationError("microgrid topology must be a tree")
    graph = InterconnectionGraph.uniform(g, tau)
    eq = np.array([0.0, params.omega_nominal, 0.0])
    box = [[-params.dist_bound, params.dist_bound]]
    agents = []
    for i in range(n):
        nbrs = graph.neighbors(i)

        def dyn(x, u, ns, d, i=i, nbrs=nbrs):
            return microgrid_step(params, i, x, u, ns, nbrs, d)

        # Inverters with identical local parameters and degree share a label.
        label = f"inverter-deg{len(nbrs)}-L{params.load(i):g}-B" + ",".join(f"{params.b(i, j):g}" for j in nbrs)
        agents.append(AgentSpec(3, 1, dyn, box, label, microgrid_lipschitz(params, i, nbrs), eq))
    system = InterconnectedSystem(graph, tuple(agents))
    gains = []
    for i in range(n):
        k = np.zeros((1, 3 + 3 * len(system.neighbors(i))))
        k[0, 1] = -params.k_omega
        k[0, 2] = -params.k_xi
        gains.append(k)
    nominal = LinearFeedback(system, tuple(gains))
    return Environment("microgrid", system, nominal, _initial_boxes(system, params.initial_half_width), params)


def _is_tree(g):
    n = g.shape[0]
    und = (g + g.T) > 0
    if und.sum() // 2 != n - 1:
        return False
    seen = {0}
    stack = [0]
    while stack:
        a = stack.pop()
        for b in np.flatnonzero(und[a]):
            if b not in seen:
                seen.add(int(b))
                stack.append(int(b))
    return len(seen) == n


# -------------------------------------------------------------------- linear

@dataclass(frozen=True)
class LinearParams:
    """``x' = A x + B sum_j x_j(delayed) + C u + d`` with nominal ``u = -K x``."""

    n_agents: int = 2
    a: object = 0.5
    b: object = 0.1
    c: object = 1.0
    k: object = 0.3
    state_dim: int = 1
    input_dim: int = 1
    dist_bound: float = 0.02
    topology: str = "ring"
    bidirectional: bool = None
    adjacency: object = None
    tau: int = 1
    delay_ahead: int = None
    delay_behind: int = None
    initial_half_width: object = 2.0
    labels: tuple = None

    def matrices(self):
        n, p = self.state_dim, self.input_dim

        def mat(v, shape):
            v = np.asarray(v, dtype=np.float64)
            if v.ndim == 0:
                return v * np.eye(*shape)
            if v.shape != shape:
                raise ConfigurationError(f"matrix shape {v.shape} != {shape}")
            return v

        return mat(self.a, (n, n)), mat(self.b, (n, n)), mat(self.c, (n, p)), mat(self.k, (p, n))


def make_linear(params=LinearParams()):
    A, B, C, K = params.matrices()
    n, p = params.state_dim, params.input_dim
    g, tau = build_topology(params.topology, params.n_agents, params.tau, params.bidirectional,
                            params.adjacency, params.delay_ahead, params.delay_behind)
    graph = InterconnectionGraph(g, tau)
    box = [[-params.dist_bound, params.dist_bound]] * n
    agents = []
    for i in range(params.n_agents):
        deg = len(graph.neighbors(i))

        def dyn(x, u, nbrs, d):
            out = np.asarray(x) @ A.T + np.asarray(u) @ C.T + np.asarray(d)
            for xj in nbrs:
                out = out + np.asarray(xj) @ B.T
            return out

        lip = float(np.linalg.norm(np.hstack([A, C] + [B] * deg + [np.eye(n)]), 2))
        label = params.labels[i] if params.labels else "linear"
        agents.append(AgentSpec(n, p, dyn, box, label, lip, np.zeros(n)))
    system = InterconnectedSystem(graph, tuple(agents))
    gains = [np.hstack([-K] + [np.zeros((p, n))] * len(system.neighbors(i))) for i in range(params.n_agents)]
    nominal = LinearFeedback(system, tuple(gains))
    return Environment("custom", system, nominal,
                       resolve_initial_box(system, params.initial_half_width), params)


def with_delays(env, delays):
    """Same environment under another delay assignment."""
    system = env.system.with_delays(delays)
    nominal = LinearFeedback(system, env.nominal.gains)
    return Environment(env.name, system, nominal, env.initial_box, env.params, env.error_fn)


def with_initial_box(env, boxes):
    return Environment(env.name, env.system, env.nominal, tuple(np.asarray(b, dtype=np.float64) for b in boxes),
                       env.params, env.error_fn)
