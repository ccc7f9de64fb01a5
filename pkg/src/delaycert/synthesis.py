"""Training data, the three-term certificate loss, and mini-batch SGD training."""

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from .certificate import (LocalLayout, dynamics_error, input_jacobian, project_row,
                          project_row_backward)
from .errors import ConfigurationError, TrainingError
from .neural import GradientBuffer, backward, forward, forward_cache, recenter, sgd_step
from .scalability import task_groups
from .seeding import derive_seed, rng_for
from .system import pad_history, rollout

log = logging.getLogger(__name__)

ROLLOUT, COUNTEREXAMPLE = 0, 1


@dataclass(frozen=True)
class LossWeights:
    w_imi: float = 1.0
    w_p: float = 4000.0
    w_d: float = 2000.0

    def __post_init__(self):
        if min(self.w_imi, self.w_p, self.w_d) < 0:
            raise ConfigurationError("loss weights must be nonnegative")


@dataclass(frozen=True)
class GroupData:
    """Transition tuples of one agent group in its representative's layout."""

    hist: np.ndarray
    d: np.ndarray
    u_nom: np.ndarray
    next_nom: np.ndarray
    lags: np.ndarray
    agent: np.ndarray
    provenance: np.ndarray

    def __len__(self):
        return self.hist.shape[0]

    def take(self, idx):
        return GroupData(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @staticmethod
    def concat(parts):
        parts = [p for p in parts if p is not None]
        return GroupData(*(np.concatenate([getattr(p, f) for p in parts]) for f in GroupData.__dataclass_fields__))


@dataclass(frozen=True)
class TrainingSet:
    """``train`` and ``val`` map a group representative to its tuples."""

    train: dict
    val: dict

    def size(self, split="train"):
        return sum(len(g) for g in getattr(self, split).values())

    def extended(self, extra):
        train = dict(self.train)
        for rep, data in extra.items():
            train[rep] = GroupData.concat([train.get(rep), data])
        return TrainingSet(train, self.val)


@dataclass(frozen=True)
class GroupContext:
    """Everything the loss needs about one group."""

    rep: int
    members: tuple
    layout: LocalLayout
    v_keys: tuple
    pi_key: object
    gamma_key: str


def group_contexts(system, cert, nominal=None, reduction=True):
    out = {}
    for members in task_groups(system, cert, reduction, nominal):
        rep = members[0]
        layout = LocalLayout.build(system, cert, rep)
        out[rep] = GroupContext(rep, tuple(members), layout, tuple(cert.v_index[a] for a in layout.slots),
                                cert.pi_index[rep], cert.gamma_index[rep])
    return out


# ------------------------------------------------------------------ dataset

def sample_box(boxes, rng, count):
    """Uniform samples in per-agent boxes, shape ``(count, n_i)`` each."""
    out = []
    for b in boxes:
        b = np.asarray(b, dtype=np.float64)
        if np.any(b[:, 0] > b[:, 1]):
            raise ConfigurationError("empty initial box")
        out.append(rng.uniform(b[:, 0], b[:, 1], size=(count, b.shape[0])))
    return out


def sample_initial_states(boxes, count, seed):
    """Per-trajectory seeds ``hash(root, "traj", t)``."""
    rows = [sample_box(boxes, rng_for(seed, "traj", t), 1) for t in range(count)]
    return [np.concatenate([r[i] for r in rows]) for i in range(len(boxes))]


def tuples_from_states(system, cert, contexts, padded, controls, k_range):
    """Build group data from padded state arrays.

    ``padded[a]`` has shape ``(tau + K, B, n_a)`` where index ``tau + k``
    holds the state at time ``k`` (earlier rows hold the padding).
    ``controls[a]`` has shape ``(K-1, B, p_a)``.
    """
    tau = system.tau_max
    out = {}
    for rep, ctx in contexts.items():
        parts = []
        for m in ctx.members:
            slots = cert.slots(m)
            for k in k_range:
                cols = []
                for a in slots:
                    eq = system.agents[a].equilibrium
                    for s in range(tau + 1):
                        cols.append(padded[a][tau + k - s] - eq)
                hist = np.concatenate(cols, axis=-1)
                b = hist.shape[0]
                eq_m = system.agents[m].equilibrium
                parts.append(GroupData(
                    hist,
                    np.zeros((b, system.agents[m].dist_dim)),
                    controls[m][k],
                    padded[m][tau + k + 1] - eq_m,
                    np.tile([int(system.delays[m, a]) for a in slots[1:]], (b, 1)).astype(np.int64),
                    np.full(b, m, dtype=np.int64),
                    np.full(b, ROLLOUT, dtype=np.int8)))
        out[rep] = GroupData.concat(parts)
    return out


def generate_dataset(env, cert, count, horizon, seed, contexts=None, val_fraction=0.2):
    """Nominal closed-loop rollouts with zero disturbance, split by trajectory."""
    if count < 1 or horizon < 1:
        raise ConfigurationError("count and horizon must be >= 1")
    system = env.system
    contexts = contexts or group_contexts(system, cert, env.nominal)
    x0 = sample_initial_states(env.initial_box, count, seed)
    traj = rollout(system, env.nominal, pad_history(system, x0), None, horizon)
    tau = system.tau_max
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(count)
    n_val = int(np.floor(val_fraction * count))
    splits = {"val": order[:n_val], "train": order[n_val:]}
    result = {}
    for name, idx in splits.items():
        idx = np.sort(idx)
        padded = []
        for a, xs in enumerate(traj.states):
            eq = system.agents[a].equilibrium
            pad = np.broadcast_to(eq, (tau, len(idx), eq.shape[0]))
            padded.append(np.concatenate([pad, xs[:, idx]], axis=0))
        controls = [c[:, idx] for c in traj.controls]
        if len(idx) == 0:
            result[name] = {}
            continue
        result[name] = tuples_from_states(system, cert, contexts, padded, controls, range(horizon))
    return TrainingSet(result["train"], result["val"])


# --------------------------------------------------------------------- loss

@dataclass(frozen=True)
class LossParts:
    total: float
    imi: float
    p: float
    d: float


def razumikhin_residuals(v_self, v_next, v_now, v_delayed, gamma_row, psi, p, d_norm):
    """``con_notA`` and ``con_B`` for a batch.

    ``v_now`` has shape ``(B, slots)`` with the agent itself in column 0,
    ``v_delayed`` shape ``(B, slots, tau)`` for lags 1..tau. An empty delayed
    block gives ``-inf`` (the Razumikhin premise holds vacuously).
    """
    v_self = np.asarray(v_self, dtype=np.float64)
    vd = np.asarray(v_delayed, dtype=np.float64)
    if vd.size == 0:
        con_a = np.full(v_self.shape, -np.inf)
    else:
        con_a = vd.reshape(vd.shape[0], -1).max(axis=1) - p * v_self
    con_b = np.asarray(v_now) @ np.asarray(gamma_row) + psi * np.asarray(d_norm) - np.asarray(v_next)
    return con_a, con_b


def _gather(hist, layout, q, lags):
    n = layout.dims[q]
    idx = layout.offset(q, 0) + lags[:, None] * n + np.arange(n)
    return np.take_along_axis(hist, idx, axis=1)


def total_loss(batch, ctx, cert, system, nominal, weights, need_grads=True):
    """Loss of one group batch and gradients for every parameter it touches.

    Returns ``(LossParts, grads)`` where ``grads`` maps V/controller keys to
    ``GradientBuffer`` values and gain keys to raw-row gradients.
    """
    const = cert.constants
    lay = ctx.layout
    B = len(batch)
    hist, d = batch.hist, batch.d
    nq, tau = lay.n_slots, lay.tau
    e_own = hist[:, lay.block(0, 0)]
    e_del = [_gather(hist, lay, q, batch.lags[:, q - 1]) for q in range(1, nq)]

    pi = cert.pi_nets.get(ctx.pi_key) if ctx.pi_key is not None else None
    if pi is not None:
        # networks are evaluated as net(x) - net(0) so gradients respect re-centering
        pin = np.concatenate([e_own] + e_del, axis=1)
        u_all, pi_cache = forward_cache(pi, np.vstack([pin, np.zeros((1, pin.shape[1]))]))
        u = u_all[:-1] - u_all[-1]
    else:
        u = cert.local_control(system, nominal, ctx.rep, e_own, e_del)
    e_next = dynamics_error(system, lay, e_own, u, e_del, d)

    # Group V inputs by network key: (tag, rows)
    pieces = {}

    def add(key, tag, x):
        pieces.setdefault(key, []).append((tag, x))

    add(ctx.v_keys[0], ("next",), e_next)
    for q in range(nq):
        add(ctx.v_keys[q], ("now", q), hist[:, lay.block(q, 0)])
        for s in range(1, tau + 1):
            add(ctx.v_keys[q], ("del", q, s), hist[:, lay.block(q, s)])
    values, caches = {}, {}
    for key, items in pieces.items():
        x = np.concatenate([it[1] for it in items], axis=0)
        out, cache = forward_cache(cert.v_nets[key], np.vstack([x, np.zeros((1, x.shape[1]))]))
        out = out[:-1] - out[-1]
        caches[key] = cache
        for t, (tag, _) in enumerate(items):
            values[tag] = out[t * B:(t + 1) * B, 0]

    v_now = np.stack([values[("now", q)] for q in range(nq)], axis=1)
    v_self = v_now[:, 0]
    v_next = values[("next",)]
    v_del = np.stack([np.stack([values[("del", q, s)] for s in range(1, tau + 1)], axis=1)
                      for q in range(nq)], axis=1) if tau > 0 else np.zeros((B, nq, 0))
    raw_row = cert.gamma_rows[ctx.gamma_key]
    gamma = project_row(raw_row, const.epsilon)
    d_norm = np.linalg.norm(d, axis=1) if d.shape[1] else np.zeros(B)
    con_a, con_b = razumikhin_residuals(v_self, v_next, v_now, v_del, gamma, const.psi, const.p, d_norm)
    use_a = con_a >= con_b
    m = np.where(use_a, con_a, con_b)
    ld = np.maximum(-m + const.eps_d, 0.0)

    x_norm = np.linalg.norm(e_own, axis=1)
    lo = const.a1 * x_norm - v_self + const.eps_p
    hi = v_self - const.a2 * x_norm + const.eps_p
    lp = np.maximum(lo, 0.0) + np.maximum(hi, 0.0)

    if pi is not None:
        diff = u - batch.u_nom
        nrm = np.linalg.norm(diff, axis=1)
        limi = float(nrm.mean())
    else:
        limi = 0.0
    parts = LossParts(weights.w_imi * limi + weights.w_p * float(lp.mean()) + weights.w_d * float(ld.mean()),
                      limi, float(lp.mean()), float(ld.mean()))
    if not need_grads:
        return parts, None

    gm = -(weights.w_d / B) * (ld > 0.0)
    ga = np.where(use_a, gm, 0.0)
    gb = np.where(use_a, 0.0, gm)
    g_now = gb[:, None] * gamma[None, :]
    g_now[:, 0] += -const.p * ga + (weights.w_p / B) * (-(lo > 0.0).astype(float) + (hi > 0.0))
    g_next = -gb
    g_del = np.zeros((B, nq * tau))
    if tau > 0:
        am = v_del.reshape(B, -1).argmax(axis=1)
        g_del[np.arange(B), am] = ga
    g_del = g_del.reshape(B, nq, tau)
    g_gamma = (v_now * gb[:, None]).sum(axis=0)

    grads = {}
    de_next = None
    for key, items in pieces.items():
        ups = []
        for tag, _ in items:
            if tag[0] == "next":
                ups.append(g_next)
            elif tag[0] == "now":
                ups.append(g_now[:, tag[1]])
            else:
                ups.append(g_del[:, tag[1], tag[2] - 1])
        up = np.concatenate(ups)
        up = np.concatenate([up, [-up.sum()]])[:, None]
        gbuf, dx = backward(cert.v_nets[key], caches[key], up)
        grads[key] = grads[key] + gbuf if key in grads else gbuf
        for t, (tag, _) in enumerate(items):
            if tag[0] == "next":
                de_next = dx[t * B:(t + 1) * B]
    if pi is not None:
        jac = input_jacobian(system, lay, e_own, u, e_del, d)
        du = np.einsum("bn,bnp->bp", de_next, jac)
        safe = np.where(nrm > 0.0, nrm, 1.0)
        du = du + (weights.w_imi / B) * np.where(nrm[:, None] > 0.0, diff / safe[:, None], 0.0)
        gpi, _ = backward(pi, pi_cache, np.vstack([du, -du.sum(axis=0, keepdims=True)]))
        grads[ctx.pi_key] = gpi
    grads[ctx.gamma_key] = project_row_backward(raw_row, const.epsilon, g_gamma)
    return parts, grads


def clip_gradients(grads, max_norm):
    """Scale all gradients so their joint Euclidean norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    sq = 0.0
    for g in grads.values():
        flat = g.flat() if isinstance(g, GradientBuffer) else np.asarray(g)
        sq += float(np.dot(flat, flat))
    norm = np.sqrt(sq)
    if norm <= max_norm:
        return grads
    f = max_norm / norm
    return {k: (g.scaled(f) if isinstance(g, GradientBuffer) else g * f) for k, g in grads.items()}


def apply_gradients(cert, grads, lr, freeze_pi=False):
    """One SGD step; V and controllers are re-centered at the origin."""
    v_nets = dict(cert.v_nets)
    pi_nets = dict(cert.pi_nets)
    rows = dict(cert.gamma_rows)
    for key, g in grads.items():
        if key in v_nets:
            if not g.is_zero():
                v_nets[key] = recenter(sgd_step(v_nets[key], g, lr))
        elif key in pi_nets:
            if not freeze_pi and not g.is_zero():
                pi_nets[key] = recenter(sgd_step(pi_nets[key], g, lr))
        elif key in rows:
            rows[key] = rows[key] - lr * g
    return replace(cert, v_nets=v_nets, pi_nets=pi_nets, gamma_rows=rows)


def dataset_loss(data, contexts, cert, system, nominal, weights, chunk=4096):
    """Mean loss parts over every tuple of a split."""
    tot = np.zeros(4)
    n = 0
    for rep, g in data.items():
        ctx = contexts[rep]
        for start in range(0, len(g), chunk):
            b = g.take(slice(start, start + chunk))
            parts, _ = total_loss(b, ctx, cert, system, nominal, weights, need_grads=False)
            tot += len(b) * np.array([parts.total, parts.imi, parts.p, parts.d])
            n += len(b)
    if n == 0:
        return None
    return LossParts(*(tot / n))


def train(dataset, cert, system, nominal, weights, epochs, lr, seed, batch=32, contexts=None,
          freeze_pi=False, lr_decay_every=30, lr_decay=0.5, clip_norm=10.0):
    """Mini-batch SGD; returns the best-validation snapshot and loss curves.

    Curves are rows ``(epoch, split, l_total, l_imi, l_p, l_d)``.
    """
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    contexts = contexts or group_contexts(system, cert, nominal)
    rng = np.random.default_rng(derive_seed(seed, "train"))
    curves = []
    best, best_loss = cert, np.inf
    for epoch in range(epochs):
        step = lr * lr_decay ** (epoch // lr_decay_every)
        batches = []
        for rep in sorted(dataset.train):
            n = len(dataset.train[rep])
            perm = rng.permutation(n)
            batches.extend((rep, perm[s:s + batch]) for s in range(0, n, batch))
        for b_index in rng.permutation(len(batches)):
            rep, idx = batches[b_index]
            parts, grads = total_loss(dataset.train[rep].take(idx), contexts[rep], cert, system, nominal, weights)
            if not np.isfinite(parts.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b_index} (group {rep})")
            cert = apply_gradients(cert, clip_gradients(grads, clip_norm), step, freeze_pi)
        tr = dataset_loss(dataset.train, contexts, cert, system, nominal, weights)
        va = dataset_loss(dataset.val, contexts, cert, system, nominal, weights)
        for name, parts in (("train", tr), ("val", va)):
            if parts is not None:
                curves.append((epoch, name, parts.total, parts.imi, parts.p, parts.d))
        score = (va or tr).total
        if not np.isfinite(score):
            raise TrainingError(f"non-finite loss after epoch {epoch}")
        if score < best_loss:
            best, best_loss = cert, score
    return best, curves


def write_loss_csv(path, curves, append=False, iteration=False):
    """Rows ``(epoch, split, l_total, l_imi, l_p, l_d)``, optionally led by a CEGIS iteration."""
    lead = 1 if iteration else 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow((["iter"] if iteration else []) + ["epoch", "split", "l_total", "l_imi", "l_p", "l_d"])
        for row in curves:
            w.writerow(list(row[:lead + 2]) + [repr(float(v)) for v in row[lead + 2:]])
