"""Counterexample-guided synthesis: train, verify, add counterexamples, repeat."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .certificate import dynamics_error
from .seeding import derive_seed
from .synthesis import (COUNTEREXAMPLE, GroupData, LossWeights, dataset_loss, generate_dataset,
                        group_contexts, train)
from .verification import VERIFIED, VerifyConfig, verify_certificate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    trajectories: int = 30000
    horizon: int = 50
    epochs: int = 100
    lr: float = 1e-3
    batch: int = 32
    lr_decay_every: int = 30
    lr_decay: float = 0.5
    cegis_cap: int = 100
    cex_oversample: int = 8
    pretrain_epochs: int = 10
    freeze_pi: bool = False
    clip_norm: float = 10.0


@dataclass
class CegisState:
    iteration: int
    certificate: object
    dataset: object
    history: list = field(default_factory=list)


def counterexample_tuples(cexs, env, cert, contexts, oversample=8):
    """Training tuples (one closed-loop step each) from verifier counterexamples."""
    system = env.system
    group_of = {}
    for rep, ctx in contexts.items():
        for m in ctx.members:
            group_of[m] = rep
    by_key = {}
    for rep, ctx in sorted(contexts.items()):
        by_key.setdefault(ctx.v_keys[0], rep)
    rows = {}
    for c in cexs:
        if c.k == "classk":
            rep = by_key.get(c.key)
            if rep is None:
                continue
        else:
            rep = group_of[c.agent]
        lay = contexts[rep].layout
        z = np.asarray(c.z, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            continue
        hist = np.zeros(lay.hist_dim)
        d = np.zeros(lay.dist_dim)
        if c.k == "classk":
            hist[lay.block(0, 0)] = z
        elif c.k == "inside":
            pos = 0
            for q in range(lay.n_slots):
                hist[lay.block(q, 0)] = z[pos:pos + lay.dims[q]]
                pos += lay.dims[q]
            for q, s in zip(range(1, lay.n_slots), lay.nbr_lags):
                hist[lay.block(q, s)] = z[pos:pos + lay.dims[q]]
                pos += lay.dims[q]
            d = z[pos:pos + lay.dist_dim]
        else:
            hist = z[:lay.hist_dim].copy()
            d = z[lay.hist_dim:]
        rows.setdefault(rep, []).append((hist, d))
    out = {}
    for rep, items in rows.items():
        lay = contexts[rep].layout
        hist = np.repeat(np.stack([h for h, _ in items]), oversample, axis=0)
        d = np.repeat(np.stack([x for _, x in items]), oversample, axis=0).reshape(len(hist), lay.dist_dim)
        e_own = hist[:, lay.block(0, 0)]
        e_del = [hist[:, lay.block(q, s)] for q, s in zip(range(1, lay.n_slots), lay.nbr_lags)]
        natural = system.neighbors(rep)
        by_agent = dict(zip(lay.slots[1:], e_del))
        u_nom = env.nominal.local(rep, e_own, [by_agent[j] for j in natural])
        nxt = dynamics_error(system, lay, e_own, u_nom, e_del, d)
        b = len(hist)
        out[rep] = GroupData(hist, d, u_nom, nxt, np.tile(np.asarray(lay.nbr_lags, dtype=np.int64), (b, 1)),
                             np.full(b, rep, dtype=np.int64), np.full(b, COUNTEREXAMPLE, dtype=np.int8))
    return out


def run_cegis(env, cert, weights=LossWeights(), training=TrainingConfig(), verify=VerifyConfig(),
              seed=0, log_path=None, curves_out=None):
    """CEGIS loop; returns ``(certificate, report, state)``.

    ``log_path`` receives one JSON record per iteration; ``curves_out`` (a
    list) collects loss-curve rows tagged with the iteration.
    """
    system, nominal = env.system, env.nominal
    contexts = group_contexts(system, cert, nominal)
    dataset = generate_dataset(env, cert, training.trajectories, training.horizon,
                               derive_seed(seed, "data"), contexts)
    if cert.pi_nets and training.pretrain_epochs > 0:
        cert, _ = train(dataset, cert, system, nominal, LossWeights(1.0, 0.0, 0.0), training.pretrain_epochs,
                        training.lr, derive_seed(seed, "pretrain"), training.batch, contexts,
                        clip_norm=training.clip_norm)
    state = CegisState(0, cert, dataset)
    fh = open(log_path, "w") if log_path else None

    def record(it, loss, report):
        rec = {"iter": it, "loss": loss, "cex_count": len(report.counterexamples), "verdict": report.verdict}
        state.history.append(rec)
        log.info("cegis %s", rec)
        if fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

    try:
        if training.cegis_cap == 0:
            report = verify_certificate(cert, system, nominal, env.initial_box, verify)
            parts = dataset_loss(dataset.train, contexts, cert, system, nominal, weights)
            record(0, None if parts is None else parts.total, report)
            return cert, report, state
        report = None
        for it in range(1, training.cegis_cap + 1):
            cert, curves = train(state.dataset, cert, system, nominal, weights, training.epochs, training.lr,
                                 derive_seed(seed, "train", it), training.batch, contexts, training.freeze_pi,
                                 training.lr_decay_every, training.lr_decay, training.clip_norm)
            if curves_out is not None:
                curves_out.extend((it,) + tuple(row) for row in curves)
            report = verify_certificate(cert, system, nominal, env.initial_box, verify)
            train_rows = [r for r in curves if r[1] == "train"]
            loss = min(r[2] for r in train_rows) if train_rows else None
            state.iteration = it
            state.certificate = cert
            record(it, loss, report)
            if report.verdict == VERIFIED or not report.counterexamples:
                break
            extra = counterexample_tuples(report.counterexamples, env, cert, contexts, training.cex_oversample)
            state.dataset = state.dataset.extended(extra)
        return cert, report, state
    finally:
        if fh:
            fh.close()
