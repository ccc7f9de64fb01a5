"""Discrete-time interconnected systems with delayed neighbor coupling.

Agent ``i`` evolves as ``x_i' = f_i(x_i, u_i, [x_j at lag s_ij for j in E_i], d_i)``.
Neighbor lists are always in ascending agent order. All step and rollout
functions broadcast over leading batch axes.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError

log = logging.getLogger(__name__)


def _readonly(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class InterconnectionGraph:
    """Adjacency ``G[i, j] = 1`` when agent ``i`` receives the state of ``j``.

    ``delay_bounds[i, j]`` is ``tau_ij`` on edges and 0 elsewhere.
    """

    adjacency: np.ndarray
    delay_bounds: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.adjacency)
        n = g.shape[0] if g.ndim == 2 else 0
        if g.ndim != 2 or g.shape != (n, n) or n == 0:
            raise ConfigurationError(f"adjacency must be a non-empty square matrix, got shape {g.shape}")
        if not np.all((g == 0) | (g == 1)):
            raise ConfigurationError("adjacency entries must be 0 or 1")
        if np.any(np.diag(g)):
            raise ConfigurationError("self-loops are not allowed in the adjacency")
        tau = np.asarray(self.delay_bounds)
        if tau.shape != g.shape:
            raise ConfigurationError("delay_bounds must match the adjacency shape")
        if np.any(tau[g == 1] < 1):
            i, j = np.argwhere((g == 1) & (tau < 1))[0]
            raise ConfigurationError(f"edge {j}->{i} needs a delay bound >= 1")
        tau = np.where(g == 1, tau, 0)
        object.__setattr__(self, "adjacency", _readonly(g, np.int64))
        object.__setattr__(self, "delay_bounds", _readonly(tau, np.int64))

    @classmethod
    def uniform(cls, adjacency, tau):
        g = np.asarray(adjacency, dtype=np.int64)
        return cls(g, g * int(tau))

    @property
    def n_agents(self):
        return self.adjacency.shape[0]

    @property
    def tau_max(self):
        return int(self.delay_bounds.max()) if self.delay_bounds.size else 0

    def neighbors(self, i):
        return tuple(int(j) for j in np.flatnonzero(self.adjacency[i]))

    def edges(self):
        return [(int(i), int(j)) for i, j in np.argwhere(self.adjacency == 1)]


@dataclass(frozen=True, eq=False)
class AgentSpec:
    """One agent: dimensions, step map, disturbance box, and metadata.

    ``dynamics(x, u, neighbors, d)`` must broadcast over leading axes.
    Two agents with the same ``dynamics_label`` must have identical dynamics
    in error coordinates ``x - equilibrium``.
    """

    state_dim: int
    input_dim: int
    dynamics: object
    disturbance_box: np.ndarray
    dynamics_label: str
    lipschitz_f: float
    equilibrium: np.ndarray

    def __post_init__(self):
        box = np.asarray(self.disturbance_box, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(box)) or np.any(box[:, 0] > box[:, 1]):
            raise ConfigurationError(f"{self.dynamics_label}: disturbance box must be bounded and ordered")
        if self.lipschitz_f < 0:
            raise ConfigurationError("lipschitz_f must be nonnegative")
        eq = np.asarray(self.equilibrium, dtype=np.float64).reshape(-1)
        if eq.shape != (self.state_dim,):
            raise DimensionError(self.dynamics_label, "equilibrium", self.state_dim, eq.shape[0])
        object.__setattr__(self, "disturbance_box", _readonly(box))
        object.__setattr__(self, "equilibrium", _readonly(eq))

    @property
    def dist_dim(self):
        return self.disturbance_box.shape[0]

    def dist_bound(self):
        """Largest l2 norm over the disturbance box."""
        return float(np.linalg.norm(np.abs(self.disturbance_box).max(axis=1))) if self.dist_dim else 0.0


@dataclass(frozen=True, eq=False)
class InterconnectedSystem:
    """Graph, agents, and the fixed delay assignment ``s_ij``."""

    graph: InterconnectionGraph
    agents: tuple
    delays: np.ndarray = None

    def __post_init__(self):
        agents = tuple(self.agents)
        if len(agents) != self.graph.n_agents:
            raise ConfigurationError(f"{len(agents)} agents for a graph of {self.graph.n_agents}")
        object.__setattr__(self, "agents", agents)
        s = self.graph.delay_bounds if self.delays is None else np.asarray(self.delays, dtype=np.int64)
        if s.shape != self.graph.adjacency.shape:
            raise ConfigurationError("delay assignment must match the adjacency shape")
        g = self.graph.adjacency
        for i, j in self.graph.edges():
            if not 1 <= s[i, j] <= self.graph.delay_bounds[i, j]:
                raise ConfigurationError(
                    f"delay s[{i},{j}]={s[i, j]} outside 1..{self.graph.delay_bounds[i, j]}")
        object.__setattr__(self, "delays", _readonly(np.where(g == 1, s, 0), np.int64))

    @property
    def n_agents(self):
        return self.graph.n_agents

    @property
    def tau_max(self):
        return self.graph.tau_max

    def neighbors(self, i):
        return self.graph.neighbors(i)

    def with_delays(self, delays):
        return InterconnectedSystem(self.graph, self.agents, delays)

    def equilibria(self):
        return [a.equilibrium for a in self.agents]

    def state_dims(self):
        return [a.state_dim for a in self.agents]


@dataclass(frozen=True, eq=False)
class DelayHistory:
    """Per-agent arrays of shape ``(..., tau_max + 1, n_i)``, lag 0 first."""

    states: tuple

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(_readonly(s) for s in self.states))

    @property
    def depth(self):
        return self.states[0].shape[-2]

    @property
    def batch_shape(self):
        return self.states[0].shape[:-2]

    def lag(self, i, s):
        return self.states[i][..., s, :]

    def current(self):
        return [s[..., 0, :] for s in self.states]

    def stacked(self):
        """Global vector col(x_k, ..., x_{k-tau}), agents ascending within each lag."""
        parts = []
        for s in range(self.depth):
            parts.extend(st[..., s, :] for st in self.states)
        return np.concatenate(parts, axis=-1)


def _check_len(v, n, agent, field):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or v.shape[-1] != n:
        raise DimensionError(agent, field, n, v.shape[-1] if v.ndim else 0)
    return v


def pad_history(system, initial_state):
    """Lag 0 holds ``initial_state``; older lags hold the equilibrium."""
    states = []
    depth = system.tau_max + 1
    for i, agent in enumerate(system.agents):
        x0 = _check_len(initial_state[i], agent.state_dim, i, "initial_state")
        buf = np.broadcast_to(agent.equilibrium, x0.shape[:-1] + (depth, agent.state_dim)).copy()
        buf[..., 0, :] = x0
        states.append(buf)
    return DelayHistory(tuple(states))


def neighbor_inputs(system, history, i):
    """Delayed neighbor states seen by agent ``i``."""
    out = []
    for j in system.neighbors(i):
        s = int(system.delays[i, j])
        if s >= history.depth:
            raise ConfigurationError(f"delay s[{i},{j}]={s} exceeds history depth {history.depth - 1}")
        out.append(history.lag(j, s))
    return out


def step_system(system, history, controls, disturbance):
    """One global step; returns a new ``DelayHistory``."""
    if len(history.states) != system.n_agents:
        raise ConfigurationError("history does not match the number of agents")
    new = []
    for i, agent in enumerate(system.agents):
        st = history.states[i]
        if st.shape[-1] != agent.state_dim:
            raise DimensionError(i, "history", agent.state_dim, st.shape[-1])
        u = _check_len(controls[i], agent.input_dim, i, "control")
        d = np.asarray(disturbance[i], dtype=np.float64)
        if d.shape[-1:] != (agent.dist_dim,):
            raise DimensionError(i, "disturbance", agent.dist_dim, d.shape[-1] if d.ndim else 0)
        nbrs = neighbor_inputs(system, history, i)
        x_next = np.asarray(agent.dynamics(st[..., 0, :], u, nbrs, d), dtype=np.float64)
        x_next = np.broadcast_to(x_next, st.shape[:-2] + (agent.state_dim,))
        new.append(np.concatenate([x_next[..., None, :], st[..., :-1, :]], axis=-2))
    return DelayHistory(tuple(new))


@dataclass(frozen=True)
class DisturbanceSignal:
    """Exogenous disturbance generator.

    Kinds:
      ``zero``; ``sinusoidal`` (increments of ``amplitude * sin(2 pi f t)``, so an
      uncontrolled integrator state oscillates with that amplitude);
      ``impulse`` (``amplitude`` at step 0 only); ``uniform`` (iid over W_i);
      ``sequence`` (explicit array of shape ``(T, N, n_d)``).
    ``targets`` limits the signal to some agents (``None`` means all).
    """

    kind: str = "zero"
    frequency: float = 0.0
    amplitude: float = 0.0
    targets: tuple = None
    period: float = 1.0
    sequence: object = None

    def __post_init__(self):
        if self.kind not in ("zero", "sinusoidal", "impulse", "uniform", "sequence"):
            raise ConfigurationError(f"unknown disturbance kind {self.kind!r}")

    def raw(self, system, k, batch_shape=(), rng=None):
        out = []
        for i, agent in enumerate(system.agents):
            shape = tuple(batch_shape) + (agent.dist_dim,)
            on = self.targets is None or i in self.targets
            if self.kind == "zero" or not on:
                d = np.zeros(shape)
            elif self.kind == "sinusoidal":
                w = 2.0 * np.pi * self.frequency * self.period
                d = np.full(shape, self.amplitude * (np.sin(w * (k + 1)) - np.sin(w * k)))
            elif self.kind == "impulse":
                d = np.full(shape, self.amplitude if k == 0 else 0.0)
            elif self.kind == "uniform":
                lo, hi = agent.disturbance_box[:, 0], agent.disturbance_box[:, 1]
                d = rng.uniform(lo, hi, size=shape)
            else:
                seq = np.asarray(self.sequence, dtype=np.float64)
                d = np.broadcast_to(seq[k, i], shape).copy() if k < len(seq) else np.zeros(shape)
            out.append(d)
        return out

    def sample(self, system, k, batch_shape=(), rng=None):
        """Samples clipped into each W_i (with a warning when clipping bites)."""
        out = []
        for i, d in enumerate(self.raw(system, k, batch_shape, rng)):
            box = system.agents[i].disturbance_box
            c = np.clip(d, box[:, 0], box[:, 1])
            if np.any(c != d):
                log.warning("disturbance for agent %d at step %d clipped into W_i", i, k)
            out.append(c)
        return out


@dataclass(frozen=True)
class Trajectory:
    """``states[i]`` has shape ``(T+1, ..., n_i)``; controls/disturbances ``(T, ...)``."""

    states: tuple
    controls: tuple
    disturbances: tuple

    @property
    def horizon(self):
        return self.states[0].shape[0] - 1


def rollout(system, controller, history0, disturbance=None, horizon=1, seed=None):
    """Closed-loop simulation.

    ``controller(i, own, neighbors)`` returns agent ``i``'s input from its
    current state and its delayed neighbor states.
    """
    if horizon < 0:
        raise ConfigurationError("horizon must be nonnegative")
    disturbance = disturbance or DisturbanceSignal()
    rng = np.random.default_rng(seed)
    hist = history0
    states = [[s[..., 0, :]] for s in hist.states]
    controls = [[] for _ in system.agents]
    dists = [[] for _ in system.agents]
    for k in range(horizon):
        us = []
        for i, agent in enumerate(system.agents):
            u = np.asarray(controller(i, hist.lag(i, 0), neighbor_inputs(system, hist, i)), dtype=np.float64)
            if u.ndim == 0 or u.shape[-1] != agent.input_dim:
                raise DimensionError(i, "control", agent.input_dim, u.shape[-1] if u.ndim else 0)
            us.append(np.broadcast_to(u, hist.batch_shape + (agent.input_dim,)))
        ds = disturbance.sample(system, k, hist.batch_shape, rng)
        hist = step_system(system, hist, us, ds)
        for i in range(system.n_agents):
            states[i].append(hist.lag(i, 0))
            controls[i].append(us[i])
            dists[i].append(ds[i])

    def stack(seq, agent, n):
        if seq:
            return np.stack(seq)
        return np.zeros((0,) + hist.batch_shape + (n,))

    return Trajectory(
        tuple(np.stack(s) for s in states),
        tuple(stack(c, i, a.input_dim) for i, (c, a) in enumerate(zip(controls, system.agents))),
        tuple(stack(d, i, a.dist_dim) for i, (d, a) in enumerate(zip(dists, system.agents))),
    )


def write_trajectory_csv(path, trajectory):
    """One row per scalar: ``step,agent,coord,value,control_flag``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "agent", "coord", "value", "control_flag"])
        T = trajectory.horizon
        for k in range(T + 1):
            for i, xs in enumerate(trajectory.states):
                for c, v in enumerate(np.asarray(xs[k]).reshape(-1)):
                    w.writerow([k, i, c, repr(float(v)), 0])
            if k < T:
                for i, us in enumerate(trajectory.controls):
                    for c, v in enumerate(np.asarray(us[k]).reshape(-1)):
                        w.writerow([k, i, c, repr(float(v)), 1])
