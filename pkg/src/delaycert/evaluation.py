"""Closed-loop evaluation: tracking RMSE, Lyapunov traces and the sISS envelope."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .neural import forward
from .system import DisturbanceSignal, pad_history, rollout
from .verification import compute_rho_c


@dataclass(frozen=True)
class EvaluationScenario:
    """One evaluation run.

    ``initial_offset`` (per coordinate, added to every agent's equilibrium)
    sets the starting state; ``delays`` overrides the system delays.
    """

    name: str
    environment: str
    n_agents: int
    tau_max: int
    disturbance: DisturbanceSignal = field(default_factory=DisturbanceSignal)
    horizon: int = 500
    seed: int = 0
    delays: object = None
    initial_offset: tuple = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")


def preset_scenarios(environment, n_agents, tau_max, horizon=500, seed=0):
    """Disturbance presets used for the benchmark evaluations."""
    if environment == "platoon":
        return [EvaluationScenario(f"platoon-sin-{a:g}", environment, n_agents, tau_max,
                                   DisturbanceSignal("sinusoidal", 1.0 / 15.0, a, targets=(0,)), horizon, seed)
                for a in (4.0, 7.0)]
    if environment == "drone":
        return [EvaluationScenario(f"drone-sin-{a:g}", environment, n_agents, tau_max,
                                   DisturbanceSignal("sinusoidal", 1.0 / 15.0, a), horizon, seed)
                for a in (0.5, 3.0)]
    if environment == "microgrid":
        return [EvaluationScenario(f"microgrid-omega-{a:g}", environment, n_agents, tau_max,
                                   DisturbanceSignal(), horizon, seed, initial_offset=(0.0, a, 0.0))
                for a in (0.5, 1.0)]
    if environment == "linear":
        return [EvaluationScenario(f"linear-sin-{a:g}", environment, n_agents, tau_max,
                                   DisturbanceSignal("sinusoidal", 1.0 / 15.0, a), horizon, seed)
                for a in (0.02, 0.04)]
    raise ConfigurationError(f"no evaluation presets for environment {environment!r}")


def rmse(errors):
    """Root-mean-square tracking error over steps ``1..T`` and all agents.

    ``errors[i]`` has shape ``(T+1, n_i)``; step 0 is ignored.
    """
    if not errors:
        raise ConfigurationError("no agents")
    T = np.asarray(errors[0]).shape[0] - 1
    if T < 1:
        raise ConfigurationError("need at least one step after the initial state")
    total = sum(float(np.sum(np.asarray(e, dtype=np.float64)[1:] ** 2)) for e in errors)
    return float(np.sqrt(total / (len(errors) * T)))


def lyapunov_values(cert, system, states):
    """Per-agent ``V_i(x_i - x_i*)``, shape ``(T+1, N)``."""
    cols = []
    for i, xs in enumerate(states):
        e = np.asarray(xs, dtype=np.float64) - system.agents[i].equilibrium
        cols.append(forward(cert.v_net(i), e)[..., 0])
    return np.stack(cols, axis=-1)


def lyapunov_trace(trajectory, cert, system):
    """``(V_max, V)`` with ``V_max`` of shape ``(T+1,)`` and ``V`` of ``(T+1, N)``."""
    v = lyapunov_values(cert, system, trajectory.states)
    return v.max(axis=-1), v


@dataclass(frozen=True)
class EnvelopeCheck:
    passed: bool
    worst_slack: float
    vmax: np.ndarray
    bound: np.ndarray


def siss_envelope(vmax0, disturbances, rho, c, psi, epsilon, horizon):
    """``c rho^k V_max(0) + (psi / eps) sup_{t<=k} max_i |d_{i,t}|`` for ``k = 0..T``."""
    k = np.arange(horizon + 1)
    if disturbances and np.asarray(disturbances[0]).shape[0] > 0:
        norms = np.stack([np.linalg.norm(np.asarray(d, dtype=np.float64), axis=-1) for d in disturbances], -1)
        per_step = norms.max(axis=-1)
        sup = np.maximum.accumulate(per_step)[np.minimum(k, len(per_step) - 1)]
    else:
        sup = np.zeros(horizon + 1)
    return c * rho ** k * vmax0 + (psi / epsilon) * sup


def siss_envelope_check(trajectory, cert, system, rho=None, c=None):
    """Compare the Lyapunov trace against the decay-plus-gain envelope.

    ``rho`` and ``c`` default to the closed-form values for the certificate
    constants and the system's maximal delay.
    """
    const = cert.constants
    if rho is None or c is None:
        r, cc = compute_rho_c(const.p, const.epsilon, system.tau_max)
        rho = r if rho is None else rho
        c = cc if c is None else c
    vmax, _ = lyapunov_trace(trajectory, cert, system)
    bound = siss_envelope(float(vmax[0]), list(trajectory.disturbances), rho, c, const.psi, const.epsilon,
                          trajectory.horizon)
    slack = bound - vmax
    worst = float(slack.min())
    return EnvelopeCheck(bool(worst >= 0.0), worst, vmax, bound)


def scenario_initial_state(system, scenario):
    offset = None if scenario.initial_offset is None else np.asarray(scenario.initial_offset, dtype=np.float64)
    x0 = []
    for a in system.agents:
        if offset is None:
            x0.append(a.equilibrium.copy())
        else:
            x0.append(a.equilibrium + np.broadcast_to(offset, (a.state_dim,)))
    return x0


def run_scenario(env, controller, scenario, initial_state=None):
    """Simulate one scenario from ``initial_state`` (default: its offset start)."""
    system = env.system
    if scenario.delays is not None:
        system = system.with_delays(scenario.delays)
    x0 = initial_state if initial_state is not None else scenario_initial_state(system, scenario)
    traj = rollout(system, controller, pad_history(system, x0), scenario.disturbance, scenario.horizon,
                   seed=scenario.seed)
    return system, traj


def write_rmse_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "controller", "value"])
        for scenario, controller, value in rows:
            w.writerow([scenario, controller, repr(float(value))])


def write_lyap_csv(path, values):
    """``values`` has shape ``(T+1, N)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "agent", "V"])
        for k, row in enumerate(np.asarray(values)):
            for i, v in enumerate(row):
                w.writerow([k, i, repr(float(v))])


def write_envelope_check_csv(path, check):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "Vmax", "bound"])
        for k, (v, b) in enumerate(zip(check.vmax, check.bound)):
            w.writerow([k, repr(float(v)), repr(float(b))])
