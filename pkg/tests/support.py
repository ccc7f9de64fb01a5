"""Shared builders for the test suite."""

import os
from dataclasses import replace

import numpy as np

from delaycert.benchmarks import LinearParams, make_linear, with_initial_box
from delaycert.certificate import CertificateConstants, init_certificate
from delaycert.neural import norm_net
from delaycert.scalability import partition_equivalent
from delaycert.verification import GridSpec, VerifyConfig

FIXTURES = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "fixtures")


def fixture_path(name):
    return os.path.join(FIXTURES, name)


def hand_certificate(env, scale=1.0, psi=0.5, a1=0.9, a2=1.1, self_gain=0.5, nbr_total=0.4, classes=None):
    """Nominal-controller certificate with ``V_i = scale * |x_i|_1`` and fixed gains."""
    system = env.system
    classes = partition_equivalent(system) if classes is None else classes
    const = CertificateConstants(psi=psi, a1=a1, a2=a2)
    cert = init_certificate(system, classes, const, (4,), (4,), controller="nominal", rng=0)
    rows = {}
    for i in range(system.n_agents):
        m = len(system.neighbors(i))
        rows[cert.gamma_index[i]] = np.array([self_gain] + [nbr_total / max(m, 1)] * m)
    v_nets = {k: norm_net(system.agents[0].state_dim, scale) for k in cert.v_nets}
    return replace(cert, v_nets=v_nets, gamma_rows=rows)


def small_box(env, half_width=0.3):
    boxes = [np.stack([a.equilibrium - half_width, a.equilibrium + half_width], axis=1)
             for a in env.system.agents]
    return with_initial_box(env, boxes)


def inside_config(reduction=True, delta_in=0.07):
    """Settings under which small-box linear chains, rings and stars verify."""
    return VerifyConfig(R=0.5, origin_radius=0.05, reduction=reduction,
                        grids=GridSpec(delta_out=0.05, delta_in=delta_in, delta_classk=0.002))


def linear_env(**kw):
    return make_linear(LinearParams(**kw))
