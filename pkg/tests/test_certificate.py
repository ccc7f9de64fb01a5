import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delaycert.certificate import (CertificateConstants, LocalLayout, closed_loop_next, init_certificate,
                                   project_gains, project_row, project_row_backward)
from delaycert.errors import ConfigurationError
from delaycert.scalability import partition_equivalent, singleton_classes
from delaycert.system import neighbor_inputs, pad_history, step_system

from support import linear_env


def test_projection_examples():
    assert np.all(project_row([-1.0, -0.2, 0.0], 0.1) == 0.0)
    assert project_row([0.5, 0.6], 0.1) == pytest.approx([0.409091, 0.490909], abs=1e-6)
    assert project_row([0.5, 0.6], 0.1).sum() == pytest.approx(0.9)
    assert project_row([0.1, 0.2], 0.1).tolist() == [0.1, 0.2]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.floats(0.01, 0.9), st.integers(0, 10_000))
def test_projected_gains_respect_mask_and_small_gain(n, eps, seed):
    rng = np.random.default_rng(seed)
    adj = (rng.random((n, n)) < 0.5).astype(int)
    np.fill_diagonal(adj, 0)
    g = project_gains(rng.normal(0, 3, (n, n)), adj, eps)
    assert np.all(g >= 0)
    assert np.all(g[(adj + np.eye(n)) == 0] == 0)
    assert np.all(g.sum(axis=1) <= 1 - eps + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_projection_backward_matches_finite_differences(seed, m):
    rng = np.random.default_rng(seed)
    row = rng.normal(0.4, 0.5, m)
    row[np.abs(row) < 1e-3] = 0.1  # stay off the ReLU kink
    eps = 0.05
    s = np.maximum(row, 0).sum()
    if abs(s - (1 - eps)) < 1e-4:
        return
    up = rng.normal(size=m)
    g = project_row_backward(row, eps, up)
    h = 1e-7
    for q in range(m):
        e = np.zeros(m)
        e[q] = h
        fd = (project_row(row + e, eps) @ up - project_row(row - e, eps) @ up) / (2 * h)
        assert fd == pytest.approx(g[q], abs=1e-5)


def test_constants_validation():
    c = CertificateConstants()
    assert (c.p, c.eps_p, c.eps_d) == (1.01, 1e-3, 1e-6)
    for bad in (dict(p=1.0), dict(epsilon=0.0), dict(a1=2.0, a2=1.0), dict(psi=-1.0)):
        with pytest.raises(ConfigurationError):
            CertificateConstants(**bad)


def test_init_certificate_sharing():
    env = linear_env(n_agents=5, topology="chain", tau=1)
    system = env.system
    cert = init_certificate(system, partition_equivalent(system), CertificateConstants(), (4,), (4,), rng=0)
    assert set(cert.v_index) == {"v:linear"}
    assert len(cert.pi_nets) == partition_equivalent(system).n_classes
    per_agent = init_certificate(system, singleton_classes(system), CertificateConstants(), (4,), (4,),
                                 share=False, rng=0)
    assert len(per_agent.v_nets) == 5
    g = cert.gamma_matrix()
    assert np.all(g.sum(axis=1) <= 1 - cert.constants.epsilon + 1e-12)


def test_layout_offsets():
    env = linear_env(n_agents=3, topology="chain", tau=2, delay_ahead=1, delay_behind=2)
    cert = init_certificate(env.system, partition_equivalent(env.system), CertificateConstants(), (4,), (4,), rng=0)
    lay = LocalLayout.build(env.system, cert, 1)
    assert lay.slots == (1, 0, 2)
    assert lay.hist_dim == 9 and lay.z_dim == 10
    assert lay.block(1, 2) == slice(5, 6)
    assert lay.nbr_lags == (1, 2)


def test_closed_loop_next_matches_system_step():
    env = linear_env(n_agents=3, topology="chain", tau=2, delay_ahead=1, delay_behind=2)
    system = env.system
    cert = init_certificate(system, partition_equivalent(system), CertificateConstants(), (4,), (4,), rng=0)
    rng = np.random.default_rng(0)
    hist = pad_history(system, [rng.normal(size=(6, 1)) for _ in range(3)])
    hist = type(hist)(tuple(rng.normal(size=s.shape) for s in hist.states))
    d = [rng.uniform(-0.02, 0.02, (6, 1)) for _ in range(3)]
    ctrl = cert.controller(system, env.nominal)
    us = [ctrl(i, hist.lag(i, 0), neighbor_inputs(system, hist, i)) for i in range(3)]
    nxt = step_system(system, hist, us, d)
    for i in range(3):
        lay = LocalLayout.build(system, cert, i)
        cols = [hist.lag(a, s) for a in lay.slots for s in range(3)]
        e, _ = closed_loop_next(system, cert, env.nominal, lay, np.concatenate(cols, axis=1), d[i])
        assert np.allclose(e, nxt.lag(i, 0))
