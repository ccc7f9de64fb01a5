"""Sampled interval envelopes of closed-loop delay histories.

The envelope at step ``k`` is a box over the stacked history
``col(x_k, ..., x_{k-tau})`` (agents ascending within each lag), computed from
rollouts and widened symmetrically. It is a heuristic over-approximation:
verdicts built on it are sound relative to the envelope only.
"""

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .system import pad_history, rollout

MAX_CORNER_DIMS = 12
MIN_WIDENING = 1e-6


@dataclass(frozen=True)
class ReachEnvelope:
    lo: np.ndarray  # (T_R + 1, D)
    hi: np.ndarray
    dims: tuple
    tau: int
    eta: float
    samples: int

    @property
    def horizon(self):
        return self.lo.shape[0] - 1

    def index(self, j, s):
        n_total = sum(self.dims)
        start = s * n_total + sum(self.dims[:j])
        return slice(start, start + self.dims[j])


@dataclass(frozen=True)
class LocalDelayDomain:
    """Box over the canonical local vector of agent ``i`` at step ``k``."""

    agent: int
    k: int
    slots: tuple
    lo: np.ndarray
    hi: np.ndarray

    @property
    def dim(self):
        return self.lo.shape[0]


def corner_points(box, count, rng):
    """Up to ``count`` distinct vertices of the box's nondegenerate coordinates."""
    lo, hi = box[:, 0], box[:, 1]
    free = np.flatnonzero(hi > lo)
    k = min(len(free), MAX_CORNER_DIMS)
    n = min(count, 2 ** k)
    if len(free) <= MAX_CORNER_DIMS:
        bits = np.array(list(itertools.product([0, 1], repeat=len(free))), dtype=bool)[:n]
        pts = np.tile(lo, (len(bits), 1))
        pts[:, free] = np.where(bits, hi[free], lo[free])
        return pts
    bits = rng.integers(0, 2, size=(n, len(free))).astype(bool)
    pts = np.tile(lo, (n, 1))
    pts[:, free] = np.where(bits, hi[free], lo[free])
    return pts


def initial_samples(initial_box, samples, rng, corners=True):
    """Corners first, then uniform interior points; returns per-agent arrays."""
    boxes = [np.asarray(b, dtype=np.float64) for b in initial_box]
    flat = np.concatenate(boxes)
    if np.any(flat[:, 0] > flat[:, 1]):
        raise ConfigurationError("empty initial box")
    pts = np.zeros((0, flat.shape[0]))
    if corners:
        free = int(np.sum(flat[:, 1] > flat[:, 0]))
        need = 2 ** min(free, MAX_CORNER_DIMS)
        if samples < need:
            raise ConfigurationError(f"{samples} samples cannot cover the {need} requested corners")
        pts = corner_points(flat, need, rng)
    rest = samples - pts.shape[0]
    if rest > 0:
        pts = np.vstack([pts, rng.uniform(flat[:, 0], flat[:, 1], size=(rest, flat.shape[0]))])
    out, start = [], 0
    for b in boxes:
        out.append(pts[:, start:start + b.shape[0]])
        start += b.shape[0]
    return out


def widen(lo, hi, eta):
    pad = np.maximum(0.5 * eta * (hi - lo), MIN_WIDENING)
    return lo - pad, hi + pad


def build_envelope(system, controller, initial_box, horizon, samples=4096, eta=0.05, seed=0, corners=True):
    """Roll out ``samples`` padded initial histories for ``horizon`` steps
    with zero disturbance and take widened coordinate-wise hulls."""
    if samples < 2:
        raise ConfigurationError("need at least 2 samples")
    if eta < 0:
        raise ConfigurationError("inflation must be nonnegative")
    rng = np.random.default_rng(seed)
    x0 = initial_samples(initial_box, samples, rng, corners)
    hist = pad_history(system, x0)
    traj = rollout(system, controller, hist, None, horizon)
    return envelope_from_trajectory(system, traj, eta, samples)


def stacked_histories(system, traj):
    """Stacked history vectors per step, shape ``(T+1, B, D)``."""
    tau = system.tau_max
    padded = []
    for a, xs in enumerate(traj.states):
        eq = system.agents[a].equilibrium
        pad = np.broadcast_to(eq, (tau,) + xs.shape[1:])
        padded.append(np.concatenate([pad, xs], axis=0))
    T = traj.horizon
    rows = []
    for k in range(T + 1):
        parts = []
        for s in range(tau + 1):
            parts.extend(p[tau + k - s] for p in padded)
        rows.append(np.concatenate(parts, axis=-1))
    return np.stack(rows)


def envelope_from_trajectory(system, traj, eta, samples):
    z = stacked_histories(system, traj)
    lo, hi = widen(z.min(axis=1), z.max(axis=1), eta)
    return ReachEnvelope(lo, hi, tuple(system.state_dims()), system.tau_max, float(eta), int(samples))


def project(envelope, k, j, s):
    """Box ``(n_j, 2)`` of agent ``j`` at lag ``s`` in the step-``k`` envelope."""
    if not 0 <= s <= envelope.tau:
        raise IndexError(f"lag {s} outside 0..{envelope.tau}")
    if not 0 <= k <= envelope.horizon:
        raise IndexError(f"step {k} outside 0..{envelope.horizon}")
    if not 0 <= j < len(envelope.dims):
        raise IndexError(f"agent {j} out of range")
    sl = envelope.index(j, s)
    return np.stack([envelope.lo[k, sl], envelope.hi[k, sl]], axis=1)


def local_domain(envelope, system, i, k, slot_order=None, errors=False):
    """Canonical local box of agent ``i`` at step ``k`` with ``W_i`` appended.

    With ``errors`` the state intervals are shifted by the equilibria.
    """
    order = system.neighbors(i) if slot_order is None else tuple(slot_order)
    slots = (i,) + order
    parts = []
    for a in slots:
        eq = system.agents[a].equilibrium if errors else 0.0
        for s in range(envelope.tau + 1):
            b = project(envelope, k, a, s)
            parts.append(b - (eq[:, None] if errors else 0.0))
    parts.append(system.agents[i].disturbance_box)
    box = np.concatenate(parts)
    return LocalDelayDomain(i, k, slots, box[:, 0].copy(), box[:, 1].copy())


def agent_bounding_box(envelope, j):
    """Hull of agent ``j`` over every step and lag, shape ``(n_j, 2)``."""
    boxes = [project(envelope, k, j, s) for k in range(envelope.horizon + 1) for s in range(envelope.tau + 1)]
    b = np.stack(boxes)
    return np.stack([b[:, :, 0].min(axis=0), b[:, :, 1].max(axis=0)], axis=1)


def containment_violations(envelope, system, controller, initial_box, samples, seed):
    """Number of fresh rollout points that leave the envelope."""
    rng = np.random.default_rng(seed)
    x0 = initial_samples(initial_box, samples, rng, corners=False)
    traj = rollout(system, controller, pad_history(system, x0), None, envelope.horizon)
    z = stacked_histories(system, traj)
    out = (z < envelope.lo[:, None, :]) | (z > envelope.hi[:, None, :])
    return int(np.any(out, axis=2).sum())


def write_envelope_csv(path, envelope):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "coord", "lo", "hi"])
        for k in range(envelope.horizon + 1):
            for c in range(envelope.lo.shape[1]):
                w.writerow([k, c, repr(float(envelope.lo[k, c])), repr(float(envelope.hi[k, c]))])
