import json

import numpy as np

from delaycert import cegis
from delaycert.cegis import TrainingConfig, counterexample_tuples, run_cegis
from delaycert.synthesis import COUNTEREXAMPLE, LossWeights, group_contexts
from delaycert.verification import REFUTED, VERIFIED, verify_certificate

from support import hand_certificate, inside_config, linear_env, small_box

FAST = dict(trajectories=4, horizon=3, epochs=1, batch=8, pretrain_epochs=0)


def counting(monkeypatch):
    calls = []

    def wrapped(*args, **kw):
        calls.append(1)
        return verify_certificate(*args, **kw)

    monkeypatch.setattr(cegis, "verify_certificate", wrapped)
    return calls


def test_verified_first_iteration_stops(monkeypatch, tmp_path):
    env = small_box(linear_env(n_agents=2, topology="ring", tau=1, dist_bound=0.01))
    cert = hand_certificate(env)
    calls = counting(monkeypatch)
    log = tmp_path / "log.jsonl"
    out, report, state = run_cegis(env, cert, LossWeights(0, 0, 0), TrainingConfig(cegis_cap=5, **FAST),
                                   inside_config(), seed=0, log_path=str(log))
    assert report.verdict == VERIFIED
    assert len(calls) == 1 and state.iteration == 1
    recs = [json.loads(l) for l in log.read_text().splitlines()]
    assert recs == [{"iter": 1, "loss": 0.0, "cex_count": 0, "verdict": VERIFIED}]


def test_zero_cap_single_pass(monkeypatch):
    env = small_box(linear_env(n_agents=2, topology="ring", tau=1, dist_bound=0.01))
    cert = hand_certificate(env, scale=1.5)
    calls = counting(monkeypatch)
    out, report, state = run_cegis(env, cert, LossWeights(), TrainingConfig(cegis_cap=0, **FAST),
                                   inside_config())
    assert len(calls) == 1 and state.iteration == 0
    assert report.verdict == REFUTED
    assert out is cert


def test_refuted_run_hits_cap_and_grows_dataset(monkeypatch):
    env = small_box(linear_env(n_agents=2, topology="ring", tau=1, dist_bound=0.01))
    cert = hand_certificate(env, scale=1.5)
    calls = counting(monkeypatch)
    _, report, state = run_cegis(env, cert, LossWeights(0, 0, 0), TrainingConfig(cegis_cap=2, **FAST),
                                 inside_config())
    assert len(calls) == 2 and state.iteration == 2
    assert report.verdict == REFUTED
    assert any(np.any(g.provenance == COUNTEREXAMPLE) for g in state.dataset.train.values())


def test_counterexample_tuples_follow_the_nominal_step():
    env = small_box(linear_env(n_agents=2, topology="ring", tau=1, dist_bound=0.01))
    cert = hand_certificate(env, scale=1.5)
    report = verify_certificate(cert, env.system, env.nominal, env.initial_box, inside_config())
    ctxs = group_contexts(env.system, cert, env.nominal)
    extra = counterexample_tuples(report.counterexamples, env, cert, ctxs, oversample=3)
    assert extra
    for g in extra.values():
        assert len(g.hist) % 3 == 0
        assert np.all(g.provenance == COUNTEREXAMPLE)
        assert np.all(np.isfinite(g.next_nom))
