import numpy as np
import pytest

from delaycert.errors import ConfigurationError
from delaycert.evaluation import (EvaluationScenario, lyapunov_trace, preset_scenarios, rmse, run_scenario,
                                  scenario_initial_state, siss_envelope, siss_envelope_check, write_envelope_check_csv,
                                  write_lyap_csv, write_rmse_csv)
from delaycert.system import DisturbanceSignal, pad_history, rollout

from support import hand_certificate, linear_env


def test_rmse_examples():
    e = [np.array([[0.0, 0.0], [3.0, 4.0]])]
    assert rmse(e) == pytest.approx(5.0)
    two = [np.array([[9.0], [1.0], [1.0]]), np.array([[9.0], [-1.0], [1.0]])]
    assert rmse(two) == pytest.approx(1.0)
    assert rmse([np.zeros((4, 2))]) == 0.0
    with pytest.raises(ConfigurationError):
        rmse([np.zeros((1, 2))])


def test_lyapunov_trace_at_equilibrium_is_zero():
    env = linear_env(n_agents=3, topology="chain", tau=1)
    cert = hand_certificate(env)
    traj = rollout(env.system, env.nominal, pad_history(env.system, [np.zeros(1)] * 3), horizon=5)
    vmax, v = lyapunov_trace(traj, cert, env.system)
    assert v.shape == (6, 3)
    assert np.all(vmax == 0.0)


def test_envelope_formula():
    bound = siss_envelope(2.0, [], 0.5, 1.5, 0.1, 0.2, 3)
    assert bound.tolist() == pytest.approx([3.0, 1.5, 0.75, 0.375])
    d = [np.array([[0.1], [0.3], [0.0], [0.0]])]
    bound = siss_envelope(0.0, d, 0.5, 1.0, 0.1, 0.2, 3)
    assert bound.tolist() == pytest.approx([0.05, 0.15, 0.15, 0.15])


def test_envelope_check_without_disturbance():
    env = linear_env(n_agents=2, topology="ring", tau=1)
    cert = hand_certificate(env, psi=2.0)
    traj = rollout(env.system, env.nominal, pad_history(env.system, [np.array([0.4]), np.array([-0.3])]),
                   horizon=50)
    check = siss_envelope_check(traj, cert, env.system)
    assert check.passed and check.worst_slack >= 0
    assert check.bound[0] == pytest.approx(cert.constants.p * check.vmax[0])


def test_scenarios_and_initial_offsets():
    env = linear_env(n_agents=2, topology="ring", tau=1)
    sc = preset_scenarios("linear", 2, 1, horizon=20)
    assert [s.name for s in sc] == ["linear-sin-0.02", "linear-sin-0.04"]
    s = EvaluationScenario("x", "linear", 2, 1, DisturbanceSignal(), 10, initial_offset=(0.2,))
    assert [x.tolist() for x in scenario_initial_state(env.system, s)] == [[0.2], [0.2]]
    _, traj = run_scenario(env, env.nominal, EvaluationScenario("eq", "linear", 2, 1, DisturbanceSignal(), 10))
    assert all(np.all(x == 0.0) for x in traj.states)
    with pytest.raises(ConfigurationError):
        preset_scenarios("boat", 2, 1)
    with pytest.raises(ConfigurationError):
        EvaluationScenario("x", "linear", 2, 1, horizon=0)


def test_csv_writers(tmp_path):
    write_rmse_csv(tmp_path / "r.csv", [("s", "neural", 0.5)])
    assert (tmp_path / "r.csv").read_text().splitlines() == ["scenario,controller,value", "s,neural,0.5"]
    write_lyap_csv(tmp_path / "v.csv", np.array([[1.0, 2.0]]))
    assert (tmp_path / "v.csv").read_text().splitlines() == ["step,agent,V", "0,0,1.0", "0,1,2.0"]
    env = linear_env()
    cert = hand_certificate(env)
    traj = rollout(env.system, env.nominal, pad_history(env.system, [np.array([0.1])] * 2), horizon=2)
    write_envelope_check_csv(tmp_path / "e.csv", siss_envelope_check(traj, cert, env.system))
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 4
