import numpy as np
import pytest

from delaycert.errors import ConfigurationError, DimensionError
from delaycert.system import (AgentSpec, DisturbanceSignal, InterconnectedSystem, InterconnectionGraph,
                              pad_history, rollout, step_system, write_trajectory_csv)


def scalar_agent(fn, label="a", eq=0.0, dist=0.0):
    return AgentSpec(1, 1, fn, [[-dist, dist]], label, 1.0, np.array([eq]))


def linear_pair(a=0.5, b=0.1, tau=1):
    def dyn(x, u, nbrs, d):
        return a * x + b * nbrs[0] + u + d
    g = np.array([[0, 1], [1, 0]])
    return InterconnectedSystem(InterconnectionGraph.uniform(g, tau), (scalar_agent(dyn), scalar_agent(dyn)))


def single(fn, eq=0.0):
    return InterconnectedSystem(InterconnectionGraph(np.zeros((1, 1), int), np.zeros((1, 1), int)),
                                (scalar_agent(fn, eq=eq),))


def zero_controls(system, batch=()):
    return [np.zeros(batch + (a.input_dim,)) for a in system.agents]


def zero_dist(system, batch=()):
    return [np.zeros(batch + (a.dist_dim,)) for a in system.agents]


def test_graph_rejects_self_loops_and_zero_delays():
    with pytest.raises(ConfigurationError):
        InterconnectionGraph(np.array([[1, 0], [0, 0]]), np.zeros((2, 2), int))
    with pytest.raises(ConfigurationError):
        InterconnectionGraph(np.array([[0, 1], [0, 0]]), np.zeros((2, 2), int))


def test_graph_neighbors_and_tau_max():
    g = InterconnectionGraph(np.array([[0, 1, 1], [0, 0, 0], [1, 0, 0]]),
                             np.array([[0, 2, 3], [0, 0, 0], [1, 0, 0]]))
    assert g.neighbors(0) == (1, 2)
    assert g.neighbors(1) == ()
    assert g.tau_max == 3


def test_delay_assignment_must_respect_bounds():
    g = InterconnectionGraph.uniform(np.array([[0, 1], [1, 0]]), 2)
    sysm = linear_pair(tau=2)
    assert sysm.with_delays(np.array([[0, 1], [2, 0]])).delays[0, 1] == 1
    with pytest.raises(ConfigurationError):
        InterconnectedSystem(g, sysm.agents, np.array([[0, 3], [1, 0]]))


def test_identity_dynamics_shift_history():
    sysm = linear_pair(a=1.0, b=0.0, tau=2)
    h = pad_history(sysm, [np.array([3.0]), np.array([-1.0])])
    h2 = step_system(sysm, h, zero_controls(sysm), zero_dist(sysm))
    assert h2.lag(0, 0)[0] == 3.0
    assert h2.lag(0, 1)[0] == 3.0
    assert h2.lag(0, 2)[0] == 0.0


def test_two_agent_linear_step_from_ones():
    sysm = linear_pair()
    h = pad_history(sysm, [np.ones(1), np.ones(1)])
    h = type(h)(tuple(np.ones_like(s) for s in h.states))
    h2 = step_system(sysm, h, zero_controls(sysm), zero_dist(sysm))
    assert h2.lag(0, 0)[0] == pytest.approx(0.6)
    assert h2.lag(1, 0)[0] == pytest.approx(0.6)


def test_pad_history_uses_equilibrium():
    sysm = single(lambda x, u, n, d: x, eq=4.0)
    h = pad_history(sysm, [np.array([4.0])])
    assert h.depth == 1  # tau_max = 0
    sysm2 = linear_pair(tau=2)
    h2 = pad_history(sysm2, [np.array([5.0]), np.array([0.0])])
    assert h2.depth == 3
    assert np.all(h2.states[0][1:] == 0.0)


def test_pad_history_rejects_wrong_length():
    with pytest.raises(DimensionError):
        pad_history(linear_pair(), [np.zeros(2), np.zeros(1)])


def test_stacked_layout():
    sysm = linear_pair()
    h = pad_history(sysm, [np.array([1.0]), np.array([2.0])])
    assert h.stacked().tolist() == [1.0, 2.0, 0.0, 0.0]


def test_rollout_scalar_contraction():
    sysm = single(lambda x, u, n, d: 0.9 * x)
    traj = rollout(sysm, lambda i, own, nb: np.zeros(1), pad_history(sysm, [np.array([1.0])]), horizon=3)
    assert traj.states[0][:, 0] == pytest.approx([1.0, 0.9, 0.81, 0.729])


def test_rollout_zero_dynamics_and_zero_horizon():
    sysm = single(lambda x, u, n, d: 0.0 * x)
    traj = rollout(sysm, lambda i, own, nb: np.zeros(1), pad_history(sysm, [np.array([7.0])]), horizon=2)
    assert np.all(traj.states[0][1:] == 0.0)
    traj0 = rollout(sysm, lambda i, own, nb: np.zeros(1), pad_history(sysm, [np.array([7.0])]), horizon=0)
    assert traj0.horizon == 0
    assert traj0.states[0][0, 0] == 7.0


def test_rollout_batched_matches_single():
    sysm = linear_pair()
    ctrl = lambda i, own, nb: -0.3 * own
    x0 = [np.array([[1.0], [-2.0]]), np.array([[0.5], [0.0]])]
    batch = rollout(sysm, ctrl, pad_history(sysm, x0), horizon=4)
    for b in range(2):
        one = rollout(sysm, ctrl, pad_history(sysm, [x0[0][b], x0[1][b]]), horizon=4)
        assert np.allclose(batch.states[0][:, b], one.states[0])


def test_disturbance_samples_stay_in_box():
    def dyn(x, u, nbrs, d):
        return x + d
    g = np.zeros((1, 1), int)
    sysm = InterconnectedSystem(InterconnectionGraph(g, g), (scalar_agent(dyn, dist=0.1),))
    rng = np.random.default_rng(0)
    for kind in (DisturbanceSignal("uniform"), DisturbanceSignal("sinusoidal", 0.25, 5.0),
                 DisturbanceSignal("impulse", amplitude=3.0)):
        for k in range(10):
            d = kind.sample(sysm, k, (50,), rng)[0]
            assert np.all(np.abs(d) <= 0.1)


def test_rollout_deterministic_given_seed():
    def dyn(x, u, nbrs, d):
        return 0.5 * x + d
    g = np.zeros((1, 1), int)
    sysm = InterconnectedSystem(InterconnectionGraph(g, g), (scalar_agent(dyn, dist=0.1),))
    h = pad_history(sysm, [np.array([1.0])])
    ctrl = lambda i, own, nb: np.zeros(1)
    a = rollout(sysm, ctrl, h, DisturbanceSignal("uniform"), 20, seed=3)
    b = rollout(sysm, ctrl, h, DisturbanceSignal("uniform"), 20, seed=3)
    assert np.array_equal(a.states[0], b.states[0])


def test_trajectory_csv(tmp_path):
    sysm = single(lambda x, u, n, d: 0.5 * x)
    traj = rollout(sysm, lambda i, own, nb: np.zeros(1), pad_history(sysm, [np.array([1.0])]), horizon=2)
    path = tmp_path / "t.csv"
    write_trajectory_csv(path, traj)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,agent,coord,value,control_flag"
    assert lines[1] == "0,0,0,1.0,0"
    assert len(lines) == 1 + 3 + 2
