"""Hidden Chow-Liu tree (HCLT) structures learned from discrete data."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .circuit import Circuit, CircuitBuilder

JITTER = 0.05


def infer_domains(data) -> tuple[int, ...]:
    data = np.asarray(data)
    return tuple(int(m) + 1 for m in data.max(axis=0))


def pairwise_mutual_information(data, smoothing: float = 1.0, domains=None) -> np.ndarray:
    """Symmetric matrix of pairwise mutual information in nats.

    Joint tables get ``smoothing`` pseudocounts per cell; marginals are the
    rows/columns of the smoothed joint, so every entry is a proper MI of a
    distribution and is clamped at zero against rounding. Rows of constant
    columns are exactly zero.
    """
    data = np.asarray(data, dtype=np.int64)
    n, V = data.shape
    if n < 2:
        raise ValueError("mutual information needs at least 2 samples")
    if not smoothing > 0:
        raise ValueError("smoothing must be positive")
    domains = infer_domains(data) if domains is None else tuple(domains)
    mi = np.zeros((V, V))
    # a constant column shares no information with anything; per-cell
    # smoothing would otherwise leave a tiny positive estimate
    varying = (data != data[:1]).any(axis=0)
    for i in range(V):
        di = domains[i]
        for j in range(i + 1, V):
            if not (varying[i] and varying[j]):
                continue
            dj = domains[j]
            counts = np.bincount(data[:, i] * dj + data[:, j], minlength=di * dj)
            joint = (counts.reshape(di, dj) + smoothing) / (n + smoothing * di * dj)
            pi = joint.sum(axis=1, keepdims=True)
            pj = joint.sum(axis=0, keepdims=True)
            val = float(np.sum(joint * (np.log(joint) - np.log(pi) - np.log(pj))))
            mi[i, j] = mi[j, i] = max(val, 0.0)
    return mi


@dataclass(frozen=True)
class TreeStructure:
    """Rooted spanning tree: ``parent[v]`` is ``-1`` at the root; ``order`` is top-down."""

    parent: tuple[int, ...]
    order: tuple[int, ...]

    @property
    def root(self) -> int:
        return self.order[0]

    @property
    def num_nodes(self) -> int:
        return len(self.parent)

    def children(self, v: int) -> list[int]:
        return [u for u, p in enumerate(self.parent) if p == v]

    def edges(self) -> set[tuple[int, int]]:
        return {(min(v, p), max(v, p)) for v, p in enumerate(self.parent) if p >= 0}

    def weight(self, mi) -> float:
        return float(sum(mi[i, j] for i, j in self.edges()))


def _root_tree(n: int, edges, root: int) -> TreeStructure:
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    parent = [-1] * n
    seen = [False] * n
    seen[root] = True
    order = []
    queue = deque([root])
    while queue:
        v = queue.popleft()
        order.append(v)
        for u in sorted(adj[v]):
            if not seen[u]:
                seen[u] = True
                parent[u] = v
                queue.append(u)
    if len(order) != n:
        raise ValueError("edge set does not span all variables")
    return TreeStructure(tuple(parent), tuple(order))


def chow_liu_tree(mi, root: int = 0) -> TreeStructure:
    """Maximum-weight spanning tree (Kruskal) rooted at ``root``.

    Equal weights are resolved by the lexicographically smaller ``(i, j)``.
    """
    mi = np.asarray(mi, dtype=np.float64)
    if mi.ndim != 2 or mi.shape[0] != mi.shape[1]:
        raise ValueError("mutual information table must be square")
    n = mi.shape[0]
    if not 0 <= root < max(n, 1):
        raise ValueError(f"root {root} outside 0..{n - 1}")
    iu, ju = np.triu_indices(n, k=1)
    order = np.lexsort((ju, iu, -mi[iu, ju]))
    comp = list(range(n))

    def find(a):
        while comp[a] != a:
            comp[a] = comp[comp[a]]
            a = comp[a]
        return a

    chosen = []
    for e in order:
        i, j = int(iu[e]), int(ju[e])
        ri, rj = find(i), find(j)
        if ri != rj:
            comp[ri] = rj
            chosen.append((i, j))
            if len(chosen) == n - 1:
                break
    return _root_tree(n, chosen, root)


def _jittered(probs, rng, jitter=JITTER):
    p = probs * rng.uniform(1.0 - jitter, 1.0 + jitter, size=probs.shape)
    return p / p.sum()


def build_hclt(
    tree: TreeStructure,
    hidden_size: int,
    num_heads: int,
    domains,
    data=None,
    rng=None,
    smoothing: float = 1.0,
) -> Circuit:
    """Compile a hidden Chow-Liu tree into a circuit.

    Every tree node ``v`` owns ``hidden_size`` latent states. State ``j`` of
    ``v`` is a product of a categorical leaf on ``X_v`` and, for every tree
    child ``c``, a sum unit mixing the states of ``c`` (the transition out of
    parent state ``j``). The root's states are mixed by ``num_heads`` sum
    units, one per head.

    Sum weights are drawn from a flat Dirichlet; leaves start at the smoothed
    empirical marginals of ``data`` (uniform without data), jittered by 5%.
    """
    if hidden_size < 1 or num_heads < 1:
        raise ValueError("hidden_size and num_heads must be at least 1")
    rng = np.random.default_rng(rng)
    domains = tuple(int(d) for d in domains)
    if len(domains) != tree.num_nodes:
        raise ValueError("tree and domains disagree on the number of variables")
    if data is not None:
        data = np.asarray(data, dtype=np.int64)
    children = [[] for _ in range(tree.num_nodes)]
    for v in tree.order[1:]:
        children[tree.parent[v]].append(v)

    b = CircuitBuilder(domains)
    transitions: dict[int, list[int]] = {}
    roots: list[int] = []
    ones = np.ones(hidden_size)
    for v in reversed(tree.order):
        d = domains[v]
        if data is not None:
            counts = np.bincount(data[:, v], minlength=d)[:d]
            marginal = (counts + smoothing) / (counts.sum() + smoothing * d)
        else:
            marginal = np.full(d, 1.0 / d)
        states = []
        for j in range(hidden_size):
            leaf = b.input(v, _jittered(marginal, rng))
            states.append(b.product([leaf] + [transitions[c][j] for c in children[v]]))
        if tree.parent[v] >= 0:
            transitions[v] = [b.sum(states, rng.dirichlet(ones)) for _ in range(hidden_size)]
        else:
            roots = [b.sum(states, rng.dirichlet(ones)) for _ in range(num_heads)]
    return b.build(roots)


def learn_hclt(data, hidden_size: int, num_heads: int = 1, domains=None, rng=None,
               smoothing: float = 1.0, root: int = 0) -> Circuit:
    """Chow-Liu tree from ``data`` compiled into an HCLT."""
    data = np.asarray(data, dtype=np.int64)
    domains = infer_domains(data) if domains is None else tuple(domains)
    mi = pairwise_mutual_information(data, smoothing, domains)
    tree = chow_liu_tree(mi, root)
    return build_hclt(tree, hidden_size, num_heads, domains, data=data, rng=rng, smoothing=smoothing)
