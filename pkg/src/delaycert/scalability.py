"""Structural equivalence of agents and certificate transfer between systems.

Two agents are equivalent when they share a dynamics label and their
neighborhoods match through a bijection that preserves neighbor labels,
state dimensions, and delays. Candidates come from color refinement and every
merge is validated by an explicit bijection search.
"""

from collections import defaultdict
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class EquivalenceClasses:
    """Partition of the agents.

    ``slot_orders[m]`` lists agent ``m``'s neighbors aligned with the sorted
    neighbors of its class representative; it is the witness bijection.
    """

    classes: tuple
    representatives: tuple
    slot_orders: tuple

    @property
    def n_classes(self):
        return len(self.classes)

    def class_of(self, i):
        for c, members in enumerate(self.classes):
            if i in members:
                return c
        raise KeyError(i)

    def to_json(self):
        return {str(c): {"members": list(m), "representative": r}
                for c, (m, r) in enumerate(zip(self.classes, self.representatives))}

    @staticmethod
    def from_json(data, slot_orders):
        keys = sorted(data, key=int)
        return EquivalenceClasses(tuple(tuple(data[k]["members"]) for k in keys),
                                  tuple(data[k]["representative"] for k in keys),
                                  tuple(tuple(s) for s in slot_orders))


def _node_key(system, j):
    a = system.agents[j]
    return (a.dynamics_label, a.state_dim, a.input_dim, a.dist_dim)


def _edge_key(system, i, j):
    return _node_key(system, j) + (int(system.delays[i, j]),)


def find_bijection(system, i, m, colors=None):
    """Map ``E_i`` onto ``E_m`` preserving neighbor keys and delays.

    Returns the images of ``sorted(E_i)`` in order, or ``None``. Backtracking
    with pruning on key mismatch; when ``colors`` is given, neighbor colors
    must also agree.
    """
    if _node_key(system, i) != _node_key(system, m):
        return None
    src = system.neighbors(i)
    dst = list(system.neighbors(m))
    if len(src) != len(dst):
        return None

    def key(owner, j):
        k = _edge_key(system, owner, j)
        return k + ((colors[j],) if colors is not None else ())

    src_keys = [key(i, j) for j in src]
    dst_keys = [key(m, j) for j in dst]
    if sorted(src_keys) != sorted(dst_keys):
        return None
    used = [False] * len(dst)
    image = [None] * len(src)

    def search(q):
        if q == len(src):
            return True
        for t, j in enumerate(dst):
            if not used[t] and dst_keys[t] == src_keys[q]:
                used[t] = True
                image[q] = j
                if search(q + 1):
                    return True
                used[t] = False
        return False

    return tuple(image) if search(0) else None


def refine_colors(system, rounds=1):
    """Color refinement seeded by (label, dims) over neighbor (color, delay) multisets.

    ``rounds=None`` iterates to the fixpoint.
    """
    n = system.n_agents
    seeds = {}
    colors = [seeds.setdefault(_node_key(system, i), len(seeds)) for i in range(n)]
    r = 0
    while rounds is None or r < rounds:
        sigs = [(colors[i], tuple(sorted((colors[j], int(system.delays[i, j])) for j in system.neighbors(i))))
                for i in range(n)]
        table = {}
        new = [table.setdefault(s, len(table)) for s in sigs]
        r += 1
        if len(set(new)) == len(set(colors)):
            colors = new
            break
        colors = new
    return colors


def partition_equivalent(system, rounds=1):
    """Partition agents into structurally equivalent classes.

    With the default single refinement round the relation is local: agents
    match when their closed 1-neighborhoods are isomorphic. ``rounds=None``
    refines to the fixpoint (a finer, still sound partition).
    """
    colors = refine_colors(system, rounds)
    buckets = defaultdict(list)
    for i, c in enumerate(colors):
        buckets[c].append(i)
    groups = []
    orders = {}
    for members in sorted(buckets.values()):
        remaining = list(members)
        while remaining:
            rep = remaining[0]
            group = [rep]
            orders[rep] = system.neighbors(rep)
            rest = []
            for m in remaining[1:]:
                image = find_bijection(system, rep, m)
                if image is None:
                    rest.append(m)
                else:
                    group.append(m)
                    orders[m] = image
            groups.append(tuple(group))
            remaining = rest
    groups.sort(key=lambda g: g[0])
    return EquivalenceClasses(tuple(groups), tuple(g[0] for g in groups),
                              tuple(tuple(orders[i]) for i in range(system.n_agents)))


def singleton_classes(system):
    n = system.n_agents
    return EquivalenceClasses(tuple((i,) for i in range(n)), tuple(range(n)),
                              tuple(system.neighbors(i) for i in range(n)))


# ---------------------------------------------------------- verification groups

def agent_signature(system, cert, i, nominal=None):
    """Everything that determines agent ``i``'s local verification problem."""
    slots = (i,) + tuple(cert.slot_orders[i])
    if cert.pi_index[i] is None:
        ctrl = ("nominal", None if nominal is None else nominal.gains[i].tobytes())
    else:
        ctrl = ("pi", cert.pi_index[i])
    return (
        system.agents[i].dynamics_label,
        tuple(cert.v_index[a] for a in slots),
        tuple(_node_key(system, a) for a in slots),
        tuple(int(system.delays[i, a]) for a in slots[1:]),
        cert.gamma_index[i],
        ctrl,
    )


def task_groups(system, cert, reduction=True, nominal=None):
    """Groups of agents that share one local verification problem.

    With reduction on, agents with equal signatures form one group whose
    representative is its lowest index; with reduction off every agent is
    its own group.
    """
    if not reduction:
        return [(i,) for i in range(system.n_agents)]
    buckets = {}
    for i in range(system.n_agents):
        buckets.setdefault(agent_signature(system, cert, i, nominal), []).append(i)
    return sorted((tuple(v) for v in buckets.values()), key=lambda g: g[0])


# ---------------------------------------------------------------- transfer

def identity_map(system):
    return {j: {l: l for l in (j,) + system.neighbors(j)} for j in range(system.n_agents)}


def check_substructure_iso(source, target, cmap, v_group=None):
    """Validate a substructure map; return ``None`` or a violation message.

    ``cmap[j]`` maps target node ``j`` and each of its neighbors to source
    nodes. ``v_group(a)`` names the certificate function of source node ``a``
    (default: its dynamics label); overlapping target nodes must map to the
    same group from every neighborhood they appear in.
    """
    if v_group is None:
        v_group = lambda a: source.agents[a].dynamics_label
    seen = {}
    for j in range(target.n_agents):
        if j not in cmap:
            return f"target node {j} has no local map"
        iota = cmap[j]
        closed = (j,) + target.neighbors(j)
        missing = [l for l in closed if l not in iota]
        if missing:
            return f"map for node {j} misses neighbors {missing}"
        src = iota[j]
        if not 0 <= src < source.n_agents:
            return f"node {j} maps outside the source"
        if _node_key(target, j) != _node_key(source, src):
            return f"node {j} and source node {src} have different dynamics"
        images = [iota[l] for l in target.neighbors(j)]
        if len(set(images)) != len(images):
            return f"map for node {j} is not injective"
        if set(images) != set(source.neighbors(src)):
            return f"neighbors of {j} do not map onto the neighbors of source node {src}"
        for l in target.neighbors(j):
            if _node_key(target, l) != _node_key(source, iota[l]):
                return f"neighbor {l} of {j} and source node {iota[l]} have different dynamics"
            ts, ss = int(target.delays[j, l]), int(source.delays[src, iota[l]])
            if ts != ss:
                return f"delay on edge {l}->{j} is {ts}, source edge {iota[l]}->{src} has {ss}"
        for l in closed:
            g = v_group(iota[l])
            if seen.setdefault(l, g) != g:
                return f"node {l} maps to inconsistent certificates ({seen[l]} vs {g})"
    return None


def transfer_certificate(cert, source, cmap, target):
    """Certificate for ``target`` reusing the source networks and gains."""
    problem = check_substructure_iso(source, target, cmap, v_group=lambda a: cert.v_index[a])
    if problem is not None:
        raise ValueError(f"invalid substructure map: {problem}")
    v_index, pi_index, g_index, orders = [], [], [], []
    for j in range(target.n_agents):
        iota = cmap[j]
        src = iota[j]
        inverse = {iota[l]: l for l in target.neighbors(j)}
        orders.append(tuple(inverse[a] for a in cert.slot_orders[src]))
        v_index.append(cert.v_index[src])
        pi_index.append(cert.pi_index[src])
        g_index.append(cert.gamma_index[src])
    classes = partition_equivalent(target)
    return replace(cert, v_index=tuple(v_index), pi_index=tuple(pi_index), gamma_index=tuple(g_index),
                   slot_orders=tuple(orders), classes=classes)


def chain_map(source_n, target_n):
    """Embed a bidirectional chain of ``target_n`` into one of ``source_n >= 3``.

    Ends map to ends and interior nodes to the source interior node 1.
    """
    cmap = {}
    for j in range(target_n):
        if j == 0:
            m = {0: 0}
            if target_n > 1:
                m[1] = 1
        elif j == target_n - 1:
            m = {j: source_n - 1, j - 1: source_n - 2}
        else:
            m = {j - 1: 0, j: 1, j + 1: 2}
        cmap[j] = m
    return cmap


@dataclass(frozen=True)
class _Union:
    """Disjoint union of two systems (source nodes first) for joint coloring."""

    agents: tuple
    delays: np.ndarray
    adj: tuple

    @property
    def n_agents(self):
        return len(self.agents)

    def neighbors(self, i):
        return self.adj[i]


def _disjoint_union(a, b):
    n, m = a.n_agents, b.n_agents
    delays = np.zeros((n + m, n + m), dtype=np.int64)
    delays[:n, :n] = a.delays
    delays[n:, n:] = b.delays
    adj = tuple(a.neighbors(i) for i in range(n)) + tuple(tuple(n + j for j in b.neighbors(i)) for i in range(m))
    return _Union(tuple(a.agents) + tuple(b.agents), delays, adj)


def find_substructure_map(source, target, rounds=1):
    """Local maps embedding every closed neighborhood of ``target`` into ``source``.

    Each target node goes to the first source node with the same refinement
    color (computed on the disjoint union) whose neighbors match in key and
    delay. Returns ``None`` when some node has no match.
    """
    union = _disjoint_union(source, target)
    colors = refine_colors(union, rounds)
    n = source.n_agents
    cmap = {}
    for j in range(target.n_agents):
        tj = n + j
        found = None
        for a in range(n):
            if colors[a] != colors[tj]:
                continue
            image = find_bijection(union, tj, a)
            if image is not None:
                found = (a, image)
                break
        if found is None:
            return None
        a, image = found
        m = {j: a}
        for l, b in zip(union.neighbors(tj), image):
            m[l - n] = b
        cmap[j] = m
    return cmap
