"""Grid verification of Lyapunov-Razumikhin certificates with Lipschitz margins.

Verification runs per agent group (see ``scalability.task_groups``) on boxes
in error coordinates:

* class-K bounds of every V network on a box covering the envelope and the
  inside box, outside a small ball around the origin;
* Stage 1 on the envelope's local delay domains for ``k = 0..T_R``, skipping
  grid cells that lie inside ``{V_max <= R}``;
* Stage 2 on the inside box ``|x| <= R / a1`` per coordinate.

Grids are enumerated lazily by blocks of coordinates (one block per agent and
lag plus the disturbance) so V can be tabulated once per block.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .certificate import LocalLayout, closed_loop_next, dynamics_error
from .errors import ConfigurationError
from .neural import forward
from .reachability import agent_bounding_box, build_envelope, local_domain
from .scalability import task_groups

log = logging.getLogger(__name__)

VERIFIED, REFUTED, INCONCLUSIVE = "verified", "refuted", "inconclusive-cap"
ORIGIN_TOL = 1e-6
CHUNK = 1 << 18
TABLE_CAP = 1 << 24
CAVEAT = ("sound relative to the sampled reach envelope; the envelope is a heuristic "
          "over-approximation of the reachable delay histories")


@dataclass(frozen=True)
class GridSpec:
    delta_out: float = 0.05
    delta_in: float = 0.01
    delta_classk: float = None
    point_cap: int = 10 ** 8
    cex_cap: int = 1024
    slack: float = 1.0

    def __post_init__(self):
        if self.delta_out <= 0 or self.delta_in <= 0 or (self.delta_classk is not None and self.delta_classk <= 0):
            raise ConfigurationError("grid steps must be positive")
        if self.slack < 1.0:
            raise ConfigurationError("margin slack must be >= 1")

    @property
    def classk_step(self):
        return self.delta_in if self.delta_classk is None else self.delta_classk


@dataclass(frozen=True)
class VerifyConfig:
    R: float = 0.15
    c: float = None
    rho_override: float = None
    T_R_override: int = None
    samples: int = 4096
    eta: float = 0.05
    origin_radius: float = 0.05
    reduction: bool = True
    seed: int = 0
    grids: GridSpec = GridSpec()
    lipschitz: str = "norm-product"


# ------------------------------------------------------------ closed forms

def compute_rho_c(p, epsilon, tau_max):
    """Decay rate ``rho = max(exp(-ln p / (tau_max + 1)), 1 - eps)`` and ``c = p``."""
    if not p > 1 or not 0 < epsilon < 1 or tau_max < 0:
        raise ConfigurationError("need p > 1, 0 < epsilon < 1, tau_max >= 0")
    rho = max(math.exp(-math.log(p) / (tau_max + 1)), 1.0 - epsilon)
    return rho, p


def compute_TR(R, c, vmax0, rho):
    """Steps until ``c rho^k V_max(0) <= R``; 0 when already inside."""
    if R <= 0 or not 0 < rho < 1:
        raise ConfigurationError("need R > 0 and 0 < rho < 1")
    if vmax0 <= 0 or R >= c * vmax0:
        return 0
    return max(0, math.ceil(math.log(R / (c * vmax0)) / math.log(rho)))


def min_admissible_R(psi, epsilon, dbar):
    return psi / epsilon * dbar


@dataclass(frozen=True)
class Margins:
    L_h: float
    L_r: float
    eps_out: float
    eps_in: float
    delta_out: float
    delta_in: float


def compute_margins(p, psi, L_vi, L_v_slots, gamma_row, L_fi, eps_out=0.0, eps_in=0.0, slack=1.0):
    """Lipschitz constants of the two residuals and the grid margins.

    ``L_v_slots`` and ``gamma_row`` run over the agent and its neighbors.
    """
    L_v_slots = np.asarray(L_v_slots, dtype=np.float64)
    L_h = float(p * L_vi + L_v_slots.max())
    L_r = float(L_vi * L_fi + np.sum(np.abs(np.asarray(gamma_row, dtype=np.float64)) * L_v_slots) + psi)
    eps_out, eps_in = float(eps_out), float(eps_in)
    return Margins(L_h, L_r, eps_out, eps_in, slack * L_r * eps_out, slack * L_r * eps_in)


# --------------------------------------------------------------------- grid

class Grid:
    """Uniform grid including both endpoints of every interval.

    Coordinates are computed on demand so that oversized grids cost nothing
    until the point cap is checked.
    """

    def __init__(self, lo, hi, delta):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise ConfigurationError("grid box must be finite")
        if np.any(self.hi < self.lo):
            raise ConfigurationError("grid box has lo > hi")
        w = self.hi - self.lo
        steps = np.ceil(np.minimum(w / delta - 1e-9, 1e15))
        self.counts = np.where(w > 0, steps.astype(np.int64) + 1, 1)
        self.spacing = np.where(self.counts > 1, w / np.maximum(self.counts - 1, 1), 0.0)

    @property
    def eps(self):
        """Half the cell diagonal: every box point is this close to a grid point."""
        return 0.5 * float(np.linalg.norm(self.spacing))

    @property
    def size(self):
        return _product(self.counts)

    def values(self, c, idx):
        idx = np.asarray(idx)
        v = self.lo[c] + idx * self.spacing[c]
        return np.where(idx == self.counts[c] - 1, self.hi[c], v)

    def points(self, idx):
        return np.stack([self.values(c, ix) for c, ix in enumerate(idx)], axis=1)

    def block_points(self, coords):
        if not coords:
            return np.zeros((1, 0))
        sizes = tuple(int(self.counts[c]) for c in coords)
        idx = np.unravel_index(np.arange(_product(sizes)), sizes)
        return np.stack([self.values(c, ix) for c, ix in zip(coords, idx)], axis=1)

    def block_size(self, coords):
        return _product([self.counts[c] for c in coords]) if coords else 1


def _product(sizes):
    return int(np.prod(np.asarray(sizes, dtype=np.float64)))


def _enumerate(sizes, chunk=CHUNK):
    total = _product(sizes)
    for start in range(0, total, chunk):
        flat = np.arange(start, min(total, start + chunk), dtype=np.int64)
        yield np.unravel_index(flat, sizes)


# ------------------------------------------------------------ result types

@dataclass
class Counterexample:
    agent: int
    members: tuple
    k: object
    z: list
    condition: str
    residuals: dict
    key: str = None


@dataclass
class TaskResult:
    name: str
    agent: object
    k: object
    points: int = 0
    checked: int = 0
    worst: float = -np.inf
    status: str = "pass"
    counterexamples: list = field(default_factory=list)
    margins: dict = None
    note: str = None

    def stats(self):
        return {"task": self.name, "agent": self.agent, "k": self.k, "points": self.points,
                "checked": self.checked, "worst": None if not np.isfinite(self.worst) else float(self.worst),
                "status": self.status, "counterexamples": len(self.counterexamples),
                "margins": self.margins, "note": self.note}


@dataclass
class VerificationReport:
    verdict: str
    tasks: list
    counterexamples: list
    constants: dict
    T_R: int
    R: float
    rho: float
    c: float
    vmax0: float
    lipschitz: dict
    caveat: str = CAVEAT
    timing: dict = field(default_factory=dict)

    def to_json(self, timing=True):
        out = {
            "verdict": self.verdict,
            "T_R": self.T_R,
            "R": self.R,
            "rho": self.rho,
            "c": self.c,
            "vmax0": self.vmax0,
            "constants": self.constants,
            "lipschitz": self.lipschitz,
            "envelope_caveat": self.caveat,
            "tasks": [t.stats() for t in self.tasks],
            "counterexamples": [asdict(c) for c in self.counterexamples],
        }
        if timing:
            out["timing"] = self.timing
        return out


def _v(net, x):
    return forward(net, x)[:, 0]


# ----------------------------------------------------------------- class-K

def classk_check(v_net, lo, hi, a1, a2, delta, L_v, origin_radius=0.0, cap=10 ** 8, cex_cap=1024, key=None):
    """Check ``a1|x| + m <= V(x) <= a2|x| - m`` on grid points away from the origin.

    ``m = (L_v + max(a1, a2)) * eps``. Grid points within ``origin_radius - eps``
    of the origin are skipped; the origin itself needs ``|V(0)| <= 1e-6``.
    """
    res = TaskResult(f"classk[{key}]", None, "classk")
    v0 = float(_v(v_net, np.zeros((1, len(lo))))[0])
    if abs(v0) > ORIGIN_TOL:
        res.status = "fail"
        res.counterexamples.append(Counterexample(-1, (), "classk", [0.0] * len(lo), "class-K origin",
                                                  {"V0": v0}, key))
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        res.status = "cap"
        res.note = "unbounded domain"
        return res
    grid = Grid(lo, hi, delta)
    eps = grid.eps
    m = (L_v + max(a1, a2)) * eps
    res.margins = {"eps": eps, "m": m}
    total = grid.size
    res.points = total
    if total > cap:
        res.status = "cap"
        res.note = f"{total} grid points exceed the cap {cap}"
        return res
    if np.all(np.asarray(hi) == np.asarray(lo)) and np.allclose(lo, 0.0):
        return res
    for idx in _enumerate(tuple(int(c) for c in grid.counts)):
        x = grid.points(idx)
        nrm = np.linalg.norm(x, axis=1)
        keep = nrm >= origin_radius - eps
        if origin_radius <= 0:
            keep &= nrm > 0
        if not np.any(keep):
            continue
        x, nrm = x[keep], nrm[keep]
        v = _v(v_net, x)
        lower = a1 * nrm + m - v
        upper = v - a2 * nrm + m
        res.checked += len(v)
        res.worst = max(res.worst, float(np.max(np.maximum(lower, upper))))
        bad = np.flatnonzero((lower > 0) | (upper > 0))
        for b in bad[:max(0, cex_cap - len(res.counterexamples))]:
            cond = "class-K lower" if lower[b] > 0 else "class-K upper"
            res.counterexamples.append(Counterexample(-1, (), "classk", x[b].tolist(), cond,
                                                      {"lower": float(lower[b]), "upper": float(upper[b])}, key))
        if len(bad):
            res.status = "fail"
    return res


# ------------------------------------------------------------ local problem

class LocalProblem:
    """Frozen certificate, controller and dynamics of one agent group."""

    def __init__(self, system, cert, nominal, members, lip_v, lip_pi):
        rep = members[0]
        self.system, self.cert, self.nominal = system, cert, nominal
        self.members = tuple(members)
        self.rep = rep
        self.layout = LocalLayout.build(system, cert, rep)
        self.keys = tuple(cert.v_index[a] for a in self.layout.slots)
        self.nets = [cert.v_nets[k] for k in self.keys]
        self.L_v = np.array([lip_v[k] for k in self.keys])
        self.gamma = cert.gamma_row(rep)
        if cert.pi_index[rep] is None:
            L_pi = nominal.lipschitz(rep)
        else:
            L_pi = lip_pi[cert.pi_index[rep]]
        self.L_pi = float(L_pi)
        self.L_cl = system.agents[rep].lipschitz_f * math.sqrt(1.0 + self.L_pi ** 2)

    def margins(self, eps_out=0.0, eps_in=0.0, slack=1.0):
        c = self.cert.constants
        return compute_margins(c.p, c.psi, self.L_v[0], self.L_v, self.gamma, self.L_cl, eps_out, eps_in, slack)

    def next_value(self, e_own, e_del, d):
        """``(V_i(next), psi |d|)`` for a batch of f-inputs."""
        lay = self.layout
        u = self.cert.local_control(self.system, self.nominal, self.rep, e_own, e_del)
        e_next = dynamics_error(self.system, lay, e_own, u, e_del, d)
        vn = _v(self.nets[0], e_next)
        dn = np.linalg.norm(d, axis=1) if d.shape[1] else np.zeros(len(vn))
        return vn, self.cert.constants.psi * dn


class _Blocks:
    """Coordinate blocks of a grid with tabulated V values per block."""

    def __init__(self, grid, coords, nets):
        self.grid = grid
        self.coords = coords  # list of coordinate index lists
        self.sizes = tuple(grid.block_size(c) for c in coords)
        self.points = [grid.block_points(c) for c in coords]
        self.tables = [None if net is None else _v(net, pts) for net, pts in zip(nets, self.points)]

    def assemble(self, idx, which=None):
        which = range(len(self.coords)) if which is None else which
        return [self.points[b][idx[b]] for b in which]


def _f_table(problem, blocks, self_b, del_bs, d_b):
    """Tabulate ``V_i(next)`` and ``psi |d|`` over the f-input blocks."""
    use = [self_b] + list(del_bs) + ([d_b] if d_b is not None else [])
    sizes = tuple(blocks.sizes[b] for b in use)
    total = _product(sizes)
    if total > TABLE_CAP:
        return None, use, sizes
    vn_tab = np.empty(total)
    pd_tab = np.empty(total)
    start = 0
    for idx in _enumerate(sizes):
        parts = [blocks.points[b][ix] for b, ix in zip(use, idx)]
        e_own = parts[0]
        e_del = parts[1:1 + len(del_bs)]
        d = parts[-1] if d_b is not None else np.zeros((len(e_own), 0))
        vn, pd = problem.next_value(e_own, e_del, d)
        vn_tab[start:start + len(vn)] = vn
        pd_tab[start:start + len(vn)] = pd
        start += len(vn)
    return (vn_tab, pd_tab), use, sizes


def _f_lookup(problem, blocks, table, use, sizes, idx, n_del, has_d):
    if table is not None:
        flat = np.ravel_multi_index(tuple(idx[b] for b in use), sizes)
        return table[0][flat], table[1][flat]
    parts = [blocks.points[b][idx[b]] for b in use]
    d = parts[-1] if has_d else np.zeros((len(parts[0]), 0))
    return problem.next_value(parts[0], parts[1:1 + n_del], d)


def _z_from(blocks, idx, order, b):
    """Local vector of one point in the canonical coordinate order."""
    z = np.zeros(blocks.grid.lo.shape[0])
    for blk, coords in enumerate(blocks.coords):
        if blk in order:
            z[coords] = blocks.points[blk][idx[blk][b]]
    return z


# ------------------------------------------------------------------ stage 1

def group_domain(envelope, system, problem, k):
    """Hull of the members' local domains in error coordinates."""
    lo = hi = None
    for m in problem.members:
        dom = local_domain(envelope, system, m, k, problem.cert.slot_orders[m], errors=True)
        lo = dom.lo if lo is None else np.minimum(lo, dom.lo)
        hi = dom.hi if hi is None else np.maximum(hi, dom.hi)
    return lo, hi


def stage1_verify(problem, envelope, k, R, grids):
    """Sampled Razumikhin-or-decrement check on the step-``k`` domain."""
    lay = problem.layout
    c = problem.cert.constants
    res = TaskResult(f"stage1[{problem.rep},k={k}]", problem.rep, k)
    lo, hi = group_domain(envelope, problem.system, problem, k)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        res.status = "cap"
        res.note = "unbounded domain"
        return res
    grid = Grid(lo, hi, grids.delta_out)
    mg = problem.margins(eps_out=grid.eps, slack=grids.slack)
    res.margins = asdict(mg)
    tau = lay.tau
    coords, nets, where = [], [], {}
    for q in range(lay.n_slots):
        for s in range(tau + 1):
            sl = lay.block(q, s)
            where[(q, s)] = len(coords)
            coords.append(list(range(sl.start, sl.stop)))
            nets.append(problem.nets[q])
    d_b = None
    if lay.dist_dim:
        d_b = len(coords)
        coords.append(list(range(lay.hist_dim, lay.z_dim)))
        nets.append(None)
    sizes = [grid.block_size(cs) for cs in coords]
    res.points = _product(sizes)
    if max(sizes) > TABLE_CAP:
        res.status = "cap"
        res.note = f"block of {max(sizes)} points exceeds the table cap"
        return res
    blocks = _Blocks(grid, coords, nets)
    thr = R - float(problem.L_v.max()) * grid.eps
    lag0 = [where[(q, 0)] for q in range(lay.n_slots)]
    if all(blocks.tables[b].max() <= thr for b in lag0):
        res.note = "vacuous"
        return res
    if res.points > grids.point_cap:
        res.status = "cap"
        res.note = f"{res.points} grid points exceed the cap {grids.point_cap}"
        return res
    del_bs = [where[(q, s)] for q, s in zip(range(1, lay.n_slots), lay.nbr_lags)]
    table, use, sizes = _f_table(problem, blocks, where[(0, 0)], del_bs, d_b)
    older = [where[(q, s)] for q in range(lay.n_slots) for s in range(1, tau + 1)]
    for idx in _enumerate(blocks.sizes):
        v_lag0 = np.stack([blocks.tables[b][idx[b]] for b in lag0], axis=1)
        active = v_lag0.max(axis=1) > thr
        if not np.any(active):
            continue
        sel = np.flatnonzero(active)
        idx = tuple(ix[sel] for ix in idx)
        v_now = v_lag0[sel]
        if older:
            v_old = np.max(np.stack([blocks.tables[b][idx[b]] for b in older], axis=1), axis=1)
            h = c.p * v_now[:, 0] - v_old
        else:
            h = np.full(len(sel), np.inf)
        vn, pd = _f_lookup(problem, blocks, table, use, sizes, idx, len(del_bs), d_b is not None)
        r = vn - pd - v_now @ problem.gamma
        fail_h = h + mg.L_h * grid.eps
        fail_r = r + mg.delta_out
        score = np.minimum(fail_h, fail_r)
        res.checked += len(sel)
        res.worst = max(res.worst, float(score.max()))
        bad = np.flatnonzero((fail_h >= 0) & (fail_r > 0))
        if len(bad):
            res.status = "fail"
            for b in bad[:max(0, grids.cex_cap - len(res.counterexamples))]:
                z = _z_from(blocks, idx, range(len(coords)), b)
                res.counterexamples.append(Counterexample(
                    problem.rep, problem.members, int(k), z.tolist(), "stage-1 logic",
                    {"h": float(h[b]), "r": float(r[b]), "L_h_eps": mg.L_h * grid.eps, "delta_out": mg.delta_out}))
    return res


# ------------------------------------------------------------------ stage 2

def inside_box(problem, R):
    """Half-width ``R / a1`` box per slot coordinate plus the disturbance hull."""
    lay = problem.layout
    a1 = problem.cert.constants.a1
    w = R / a1
    lo, hi = [], []
    # self lag 0, neighbors lag 0, neighbors at their delays
    for q in range(lay.n_slots):
        lo.append(np.full(lay.dims[q], -w))
        hi.append(np.full(lay.dims[q], w))
    for q in range(1, lay.n_slots):
        lo.append(np.full(lay.dims[q], -w))
        hi.append(np.full(lay.dims[q], w))
    if lay.dist_dim:
        boxes = [problem.system.agents[m].disturbance_box for m in problem.members]
        lo.append(np.min([b[:, 0] for b in boxes], axis=0))
        hi.append(np.max([b[:, 1] for b in boxes], axis=0))
    return np.concatenate(lo), np.concatenate(hi)


def stage2_verify(problem, R, grids):
    """Inside check on ``S_R``: decrement with margin, or the next value stays
    below ``R`` with margin (forward invariance of the sublevel set).

    Coordinates: own state, neighbor states now, neighbor states at their
    delays, disturbance.
    """
    lay = problem.layout
    res = TaskResult(f"stage2[{problem.rep}]", problem.rep, "inside")
    lo, hi = inside_box(problem, R)
    grid = Grid(lo, hi, grids.delta_in)
    mg = problem.margins(eps_in=grid.eps, slack=grids.slack)
    res.margins = asdict(mg)
    coords, nets, Ls = [], [], []
    start = 0
    for q in list(range(lay.n_slots)) + list(range(1, lay.n_slots)):
        coords.append(list(range(start, start + lay.dims[q])))
        nets.append(problem.nets[q])
        Ls.append(problem.L_v[q])
        start += lay.dims[q]
    n_state = len(coords)
    d_b = None
    if lay.dist_dim:
        d_b = len(coords)
        coords.append(list(range(start, start + lay.dist_dim)))
        nets.append(None)
    sizes = [grid.block_size(cs) for cs in coords]
    res.points = _product(sizes)
    if res.points > grids.point_cap or max(sizes) > TABLE_CAP:
        res.status = "cap"
        res.note = f"{res.points} grid points exceed the cap {grids.point_cap}"
        return res
    blocks = _Blocks(grid, coords, nets)
    # keep only block points whose cell can meet {V <= R}
    keep = [blocks.tables[b] - Ls[b] * grid.eps <= R for b in range(n_state)]
    sub = [np.flatnonzero(kp) for kp in keep]
    if any(len(s) == 0 for s in sub):
        res.note = "empty"
        return res
    sub_sizes = tuple(len(s) for s in sub) + ((blocks.sizes[d_b],) if d_b is not None else ())
    del_bs = list(range(lay.n_slots, n_state))
    use = [0] + del_bs + ([d_b] if d_b is not None else [])
    # tabulate V_i(next) over the kept f-input points
    f_sizes = tuple(sub_sizes[b] for b in use)
    table = None
    if _product(f_sizes) <= TABLE_CAP:
        vn_tab, pd_tab = np.empty(_product(f_sizes)), np.empty(_product(f_sizes))
        pos = 0
        for fidx in _enumerate(f_sizes):
            full = [sub[b][ix] if b < n_state else ix for b, ix in zip(use, fidx)]
            parts = [blocks.points[b][ix] for b, ix in zip(use, full)]
            d = parts[-1] if d_b is not None else np.zeros((len(parts[0]), 0))
            vn, pd = problem.next_value(parts[0], parts[1:1 + len(del_bs)], d)
            vn_tab[pos:pos + len(vn)] = vn
            pd_tab[pos:pos + len(vn)] = pd
            pos += len(vn)
        table = (vn_tab, pd_tab)
    inv_thr = R - problem.L_v[0] * problem.L_cl * grid.eps
    res.checked = _product(sub_sizes)
    for sidx in _enumerate(sub_sizes):
        idx = [sub[b][ix] if b < n_state else ix for b, ix in enumerate(sidx)]
        if table is not None:
            flat = np.ravel_multi_index(tuple(sidx[b] for b in use), f_sizes)
            vn, pd = table[0][flat], table[1][flat]
        else:
            parts = [blocks.points[b][idx[b]] for b in use]
            d = parts[-1] if d_b is not None else np.zeros((len(parts[0]), 0))
            vn, pd = problem.next_value(parts[0], parts[1:1 + len(del_bs)], d)
        v_now = np.stack([blocks.tables[b][idx[b]] for b in range(lay.n_slots)], axis=1)
        r = vn - pd - v_now @ problem.gamma
        fail_dec = r + mg.delta_in
        fail_inv = vn - inv_thr
        score = np.minimum(fail_dec, fail_inv)
        res.worst = max(res.worst, float(score.max()))
        bad = np.flatnonzero((fail_dec > 0) & (fail_inv > 0))
        if len(bad):
            res.status = "fail"
            for b in bad[:max(0, grids.cex_cap - len(res.counterexamples))]:
                z = np.concatenate([blocks.points[blk][idx[blk][b]] for blk in range(len(coords))])
                res.counterexamples.append(Counterexample(
                    problem.rep, problem.members, "inside", z.tolist(), "stage-2 decrement",
                    {"r": float(r[b]), "delta_in": mg.delta_in, "V_next": float(vn[b]), "inv_thr": float(inv_thr)}))
    return res


# -------------------------------------------------------------- orchestrator

def vmax0_bound(cert, system, initial_box, lip_v, delta):
    """Upper bound of ``max_i V_i`` over the initial box (grid max + margin)."""
    best = 0.0
    for i, a in enumerate(system.agents):
        box = np.asarray(initial_box[i]) - a.equilibrium[:, None]
        grid = Grid(box[:, 0], box[:, 1], delta)
        net = cert.v_net(i)
        top = -np.inf
        for idx in _enumerate(tuple(int(c) for c in grid.counts)):
            x = grid.points(idx)
            top = max(top, float(_v(net, x).max()))
        best = max(best, top + lip_v[cert.v_index[i]] * grid.eps)
    return best


def classk_domains(cert, system, envelope, R):
    """Per V key: hull of agent envelope boxes (error coords) and the inside box."""
    w = R / cert.constants.a1
    out = {}
    for i, a in enumerate(system.agents):
        key = cert.v_index[i]
        box = agent_bounding_box(envelope, i) - a.equilibrium[:, None]
        lo = np.minimum(box[:, 0], -w)
        hi = np.maximum(box[:, 1], w)
        if key in out:
            lo = np.minimum(lo, out[key][0])
            hi = np.maximum(hi, out[key][1])
        out[key] = (lo, hi)
    return out


def _verdict(results):
    if any(r.counterexamples for r in results):
        return REFUTED
    if any(r.status == "cap" for r in results):
        return INCONCLUSIVE
    return VERIFIED


def verify_certificate(cert, system, nominal, initial_box, config=VerifyConfig(), stop_on_refute=False):
    """Full two-stage verification; returns a ``VerificationReport``."""
    const = cert.constants
    grids = config.grids
    t0 = time.perf_counter()
    dbar = max(a.dist_bound() for a in system.agents)
    r_min = min_admissible_R(const.psi, const.epsilon, dbar)
    if config.R < r_min:
        raise ConfigurationError(f"R = {config.R} is below the minimal admissible R = {r_min}")
    if config.origin_radius > config.R / const.a1:
        raise ConfigurationError("origin_radius must not exceed R / a1")
    lip_v = cert.v_lipschitz(config.lipschitz)
    lip_pi = cert.pi_lipschitz(config.lipschitz)
    rho, c = compute_rho_c(const.p, const.epsilon, system.tau_max)
    if config.c is not None:
        c = config.c
    if config.rho_override is not None:
        rho = config.rho_override
    vmax0 = vmax0_bound(cert, system, initial_box, lip_v, grids.delta_out)
    T_R = compute_TR(config.R, c, vmax0, rho) if config.T_R_override is None else int(config.T_R_override)
    controller = cert.controller(system, nominal)
    envelope = build_envelope(system, controller, initial_box, T_R, config.samples, config.eta, config.seed)
    t_env = time.perf_counter()
    results = []

    def done():
        return stop_on_refute and any(r.counterexamples for r in results)

    for key, (lo, hi) in sorted(classk_domains(cert, system, envelope, config.R).items()):
        results.append(classk_check(cert.v_nets[key], lo, hi, const.a1, const.a2, grids.classk_step,
                                    lip_v[key], config.origin_radius, grids.point_cap, grids.cex_cap, key))
    t_ck = time.perf_counter()
    groups = task_groups(system, cert, config.reduction, nominal)
    problems = [LocalProblem(system, cert, nominal, g, lip_v, lip_pi) for g in groups]
    for k in range(T_R + 1):
        if done():
            break
        for prob in problems:
            results.append(stage1_verify(prob, envelope, k, config.R, grids))
    t_s1 = time.perf_counter()
    for prob in problems:
        if done():
            break
        results.append(stage2_verify(prob, config.R, grids))
    t_s2 = time.perf_counter()
    cexs = [c for r in results for c in r.counterexamples]
    lips = {"V": lip_v, "pi": lip_pi,
            "closed_loop": {str(p.rep): p.L_cl for p in problems},
            "f": [a.lipschitz_f for a in system.agents]}
    return VerificationReport(
        _verdict(results), results, cexs, asdict(const), T_R, config.R, rho, c, vmax0, lips,
        timing={"envelope": t_env - t0, "classk": t_ck - t_env, "stage1": t_s1 - t_ck,
                "stage2": t_s2 - t_s1, "total": t_s2 - t0, "groups": len(problems)})
