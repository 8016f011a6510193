"""Progressive growing of multi-headed circuits from embedded data.

The loop alternates four steps until the cluster count reaches ``K``:
train the labeled heads with EM, re-label every sample with its best head,
select the worst-fitting clusters, then split them in embedding space with
seeded K-means while the circuit grows matching heads.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .circuit import Circuit, CircuitBuilder, reachable_units, stack_heads, subcircuit
from .em import LEAF_PSEUDOCOUNT, LabeledBatch, compute_flows, prune, train_em
from .errors import ParseError

log = logging.getLogger(__name__)

JITTER = 0.05
CROSS_MASS = 0.01


class GrowthStalled(UserWarning):
    """Progressive growing stopped before reaching the target cluster count."""


@dataclass
class EmbeddedDataset:
    """Discrete observations ``x`` paired with continuous embeddings ``h``."""

    x: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.x.ndim != 2 or self.h.ndim != 2 or len(self.x) != len(self.h):
            raise ValueError("x and h must be 2-d with one row per record")

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "EmbeddedDataset":
        return EmbeddedDataset(self.x[idx], self.h[idx])


@dataclass
class ClusterMap:
    """Centroids in embedding space and the label of every training record."""

    centroids: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError("labels must lie in [0, k)")

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @classmethod
    def from_labels(cls, h, labels, k, previous=None) -> "ClusterMap":
        """Centroids as member means; empty clusters keep ``previous`` centroids."""
        h = np.asarray(h, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        counts = np.bincount(labels, minlength=k).astype(np.float64)
        sums = np.zeros((k, h.shape[1]))
        np.add.at(sums, labels, h)
        cent = np.zeros_like(sums)
        live = counts > 0
        cent[live] = sums[live] / counts[live, None]
        if previous is not None and (~live).any():
            cent[~live] = np.asarray(previous)[~live]
        return cls(cent, labels)

    def assign(self, h) -> np.ndarray:
        """Nearest-centroid labels for new embeddings (ties to the lower index)."""
        return _nearest(np.asarray(h, dtype=np.float64), self.centroids)


def _sq_dists(points, centroids):
    d = (
        np.einsum("ij,ij->i", points, points)[:, None]
        - 2.0 * points @ centroids.T
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    )
    return np.maximum(d, 0.0)


def _nearest(points, centroids, chunk=65536):
    out = np.empty(len(points), dtype=np.int64)
    for a in range(0, len(points), chunk):
        out[a : a + chunk] = np.argmin(_sq_dists(points[a : a + chunk], centroids), axis=1)
    return out


@dataclass
class GrowConfig:
    """Settings of the progressive growing loop.

    ``epsilon_fraction`` scales the flow threshold of the growing operator
    relative to the average root flow of the clusters being grown;
    ``m_step`` maps ``|I|`` to the cluster count the selected clusters are
    split into (``None`` doubles them). With ``centroid_labels`` the labels
    after reassignment are the nearest centroids of the reassigned clusters,
    so training labels remain reproducible from embeddings alone; otherwise
    the raw argmax labels are kept.
    """

    K: int
    capacity_fraction: float = 0.4
    epsilon_fraction: float = 0.01
    m_step: int | None = None
    hidden_size: int = 16
    epochs: int = 50
    batch_size: int | None = 256
    lr_start: float = 0.1
    lr_end: float = 0.01
    leaf_pseudocount: float = LEAF_PSEUDOCOUNT
    prune_keep: float = 0.9
    prune_every_iteration: bool = True
    kmeans_iters: int = 100
    jitter: float = JITTER
    centroid_labels: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not 0.0 < self.capacity_fraction < 1.0:
            raise ValueError("capacity_fraction must lie in (0, 1)")
        if self.epsilon_fraction < 0:
            raise ValueError("epsilon_fraction must be non-negative")
        if not 0.0 < self.prune_keep <= 1.0:
            raise ValueError("prune_keep must lie in (0, 1]")
        if self.m_step is not None and self.m_step < 2:
            raise ValueError("m_step must be at least 2")

    def split_width(self, n_selected: int) -> int:
        return (self.m_step if self.m_step is not None else 2) * n_selected


def reassign_clusters(circuit: Circuit, data: EmbeddedDataset, cmap: ClusterMap, head_ll=None) -> ClusterMap:
    """Relabel every record with its most likely head.

    Ties keep the current label, then go to the lowest index. A cluster left
    empty takes the record of the largest cluster that loses the least
    log-likelihood by moving.
    """
    if circuit.num_heads != cmap.k:
        raise ValueError(f"circuit has {circuit.num_heads} heads, cluster map has {cmap.k} clusters")
    if head_ll is None:
        head_ll = circuit.head_log_likelihoods(data.x)
    n = len(data)
    rows = np.arange(n)
    best = head_ll.max(axis=1)
    labels = np.where(head_ll[rows, cmap.labels] == best, cmap.labels, np.argmax(head_ll, axis=1))
    k = cmap.k
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        if n < k:
            break
        donor = int(np.argmax(counts))
        members = np.flatnonzero(labels == donor)
        loss = head_ll[members, donor] - head_ll[members, j]
        pick = members[int(np.argmin(loss))]
        labels[pick] = j
        counts[donor] -= 1
        counts[j] += 1
    return ClusterMap.from_labels(data.h, labels, k, previous=cmap.centroids)


def select_clusters(per_cluster_ll, sizes, capacity_fraction: float, total: int | None = None) -> list[int]:
    """Worst-fitting clusters whose combined size stays below the capacity.

    Clusters are visited by ascending average log-likelihood (ties to the
    lower index) and added while the running member count stays strictly
    below ``capacity_fraction * total``; the first is always taken.
    """
    ll = np.asarray(per_cluster_ll, dtype=np.float64)
    sizes = np.asarray(sizes)
    if ll.shape != sizes.shape or ll.ndim != 1 or not len(ll):
        raise ValueError("per-cluster log-likelihoods and sizes must be equal-length, non-empty")
    total = int(sizes.sum()) if total is None else total
    cap = capacity_fraction * total
    order = np.lexsort((np.arange(len(ll)), ll))
    chosen = [int(order[0])]
    count = sizes[order[0]]
    for i in order[1:]:
        if count + sizes[i] >= cap:
            break
        chosen.append(int(i))
        count += sizes[i]
    return chosen


def _farthest_point_init(points, centroids, k):
    centroids = list(centroids)
    if not centroids:
        mean = points.mean(axis=0)
        centroids.append(points[int(np.argmin(((points - mean) ** 2).sum(axis=1)))])
    d2 = _sq_dists(points, np.asarray(centroids)).min(axis=1)
    while len(centroids) < k:
        i = int(np.argmax(d2))
        centroids.append(points[i])
        d2 = np.minimum(d2, ((points - points[i]) ** 2).sum(axis=1))
    return np.array(centroids, dtype=np.float64)


def seeded_kmeans(points, k_new: int, seeds=None, max_iters: int = 100, return_n_iter: bool = False):
    """Lloyd's K-means whose first centroids start at ``seeds``.

    Remaining centroids come from farthest-point sampling. An emptied
    cluster steals the point of the largest cluster farthest from its
    centroid. Returns ``(labels, centroids)`` and, optionally, the number of
    assignment passes.
    """
    points = np.asarray(points, dtype=np.float64)
    seeds = np.zeros((0, points.shape[1])) if seeds is None else np.asarray(seeds, dtype=np.float64)
    if k_new < 1:
        raise ValueError("k_new must be at least 1")
    if k_new > len(points):
        raise ValueError(f"cannot form {k_new} clusters from {len(points)} points")
    if k_new < len(seeds):
        raise ValueError("more seeds than clusters")
    if k_new > len(np.unique(points, axis=0)):
        raise ValueError(f"cannot form {k_new} clusters from fewer distinct points")
    centroids = _farthest_point_init(points, seeds, k_new)
    labels = None
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new = _nearest(points, centroids)
        counts = np.bincount(new, minlength=k_new)
        for j in np.flatnonzero(counts == 0):
            donor = int(np.argmax(counts))
            members = np.flatnonzero(new == donor)
            far = members[int(np.argmax(((points[members] - centroids[donor]) ** 2).sum(axis=1)))]
            new[far] = j
            counts[donor] -= 1
            counts[j] += 1
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centroids = ClusterMap.from_labels(points, labels, k_new, previous=centroids).centroids
    if return_n_iter:
        return labels, centroids, n_iter
    return labels, centroids


def kmeans_objective(points, labels, centroids) -> float:
    return float(((np.asarray(points) - np.asarray(centroids)[labels]) ** 2).sum())


def grow_multihead(
    circuit: Circuit,
    data: LabeledBatch,
    epsilon: float,
    rng=None,
    jitter: float = JITTER,
    cross_mass: float = CROSS_MASS,
    flows=None,
) -> Circuit:
    """Duplicate the high-flow part of a multi-headed circuit.

    Units whose flow on ``data`` reaches ``epsilon`` are duplicated; every
    other unit is kept once. Sum units mix the union of their children's
    original and duplicated versions. The original slot of a grown sum keeps
    its weights on original children and gives duplicates ``cross_mass`` of
    the corresponding weight; the duplicate slot mirrors this with its own
    weights jittered by ``jitter``. Sum units below the threshold give the
    duplicates zero weight, so their distributions are unchanged. Heads of
    grown roots are appended after the existing heads, in root order.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    rng = np.random.default_rng(rng)
    if flows is None:
        flows = compute_flows(circuit, data)
    grow = flows.node >= epsilon
    b = CircuitBuilder(circuit.domains)
    U = circuit.num_units
    first = np.full(U, -1, dtype=np.int64)
    second = np.full(U, -1, dtype=np.int64)
    kinds = circuit.kinds
    for n in range(U):
        k = kinds[n]
        if k == 0:
            first[n] = b.input(circuit.var(n), circuit.probs(n))
            second[n] = b.input(circuit.var(n), circuit.probs(n).copy()) if grow[n] else first[n]
            continue
        ch = circuit.children(n)
        ch1 = [int(first[c]) for c in ch]
        ch2 = [int(second[c]) if second[c] >= 0 else int(first[c]) for c in ch]
        if k == 2:
            first[n] = b.product(ch1)
            if grow[n]:
                second[n] = b.product(ch2)
            continue
        theta = circuit.weights(n)
        cross = [j for j in range(len(ch)) if ch2[j] != ch1[j]]
        union = ch1 + [ch2[j] for j in cross]
        w_first = np.concatenate([theta, (cross_mass if grow[n] else 0.0) * theta[cross]])
        if grow[n] and cross:
            w_first = w_first / w_first.sum()
        first[n] = b.sum(union, w_first)
        if grow[n]:
            own = theta * rng.uniform(1.0 - jitter, 1.0 + jitter, size=len(theta)) if jitter else theta.copy()
            w_orig = own.copy()
            w_orig[cross] = cross_mass * theta[cross]
            w_second = np.concatenate([w_orig, own[cross]])
            second[n] = b.sum(union, w_second / w_second.sum())
    roots = [int(first[r]) for r in circuit.roots]
    roots += [int(second[r]) for r in circuit.roots if grow[r] and kinds[r] == 1]
    grown = b.build(roots)
    if not reachable_units(grown).all():
        grown = subcircuit(grown)
    return grown


def _centroid_relabel(h, cmap: ClusterMap) -> ClusterMap:
    """Nearest-centroid labels under ``cmap``'s centroids, centroids refit.

    Keeps the clustering a function of the embedding alone. A cluster that
    would end up empty keeps the members ``cmap`` gave it.
    """
    labels = cmap.assign(h)
    counts = np.bincount(labels, minlength=cmap.k)
    for j in np.flatnonzero(counts == 0):
        labels[cmap.labels == j] = j
    return ClusterMap.from_labels(h, labels, cmap.k, previous=cmap.centroids)


def _per_cluster_stats(head_ll, labels, k):
    own = head_ll[np.arange(len(labels)), labels]
    sizes = np.bincount(labels, minlength=k)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_ll = np.bincount(labels, weights=own, minlength=k) / sizes
    return per_ll, sizes


def progressive_grow(data: EmbeddedDataset, initial: Circuit, config: GrowConfig, rng=None, history=None):
    """Grow a single-headed circuit into a ``K``-headed cluster-conditioned one.

    Returns ``(ClusterMap, Circuit)``. When the selected clusters cannot be
    split further the loop stops early and a :class:`GrowthStalled` warning
    is issued. ``history``, if a list, receives one dict per iteration.
    """
    if initial.num_heads != 1:
        raise ValueError("progressive growing starts from a single-headed circuit")
    rng = np.random.default_rng(rng)
    n = len(data)
    circuit = initial
    labels = np.zeros(n, dtype=np.int64)
    cmap = ClusterMap.from_labels(data.h, labels, 1)
    k = 1
    while True:
        batch = LabeledBatch(data.x, labels)
        circuit, trace = train_em(
            circuit, batch, config.epochs, config.batch_size, config.lr_start, config.lr_end,
            rng=rng, leaf_pseudocount=config.leaf_pseudocount,
        )
        if config.prune_keep < 1.0 and (config.prune_every_iteration or k >= config.K):
            circuit = prune(circuit, batch, config.prune_keep)
        record = {"clusters": k, "units": circuit.num_units, "edges": circuit.num_edges,
                  "train_ll": trace[-1][1] if trace else None}
        if history is not None:
            history.append(record)
        log.info("progressive growing: %s", record)
        if k >= config.K:
            break

        head_ll = circuit.head_log_likelihoods(data.x)
        cmap = reassign_clusters(circuit, data, cmap, head_ll=head_ll)
        if config.centroid_labels:
            cmap = _centroid_relabel(data.h, cmap)
        labels = cmap.labels

        per_ll, sizes = _per_cluster_stats(head_ll, labels, k)
        chosen = select_clusters(per_ll, sizes, config.capacity_fraction, total=n)

        sel = np.flatnonzero(np.isin(labels, chosen))
        width = min(config.split_width(len(chosen)), len(chosen) + config.K - k)
        width = min(width, len(np.unique(data.h[sel], axis=0)))
        if width <= len(chosen):
            warnings.warn(
                f"progressive growing stalled at {k} of {config.K} clusters: "
                "selected clusters cannot be split further",
                GrowthStalled,
                stacklevel=2,
            )
            break
        km_labels, _ = seeded_kmeans(data.h[sel], width, cmap.centroids[chosen], config.kmeans_iters)

        # each extra K-means cluster is paired with the selected head whose
        # members it absorbed most; that head's root is the one duplicated
        n_add = width - len(chosen)
        overlap = np.zeros((n_add, len(chosen)))
        pos = {c: j for j, c in enumerate(chosen)}
        old_pos = np.array([pos[l] for l in labels[sel]])
        np.add.at(overlap, (km_labels[km_labels >= len(chosen)] - len(chosen), old_pos[km_labels >= len(chosen)]), 1.0)
        rows, cols = linear_sum_assignment(-overlap)
        parent_of_extra = {int(r): chosen[int(c)] for r, c in zip(rows, cols)}
        parents = sorted(parent_of_extra.values())
        grow_idx = np.flatnonzero(np.isin(labels, parents))
        root_flows = sizes[parents]
        epsilon = min(config.epsilon_fraction * len(grow_idx) / len(parents), float(root_flows.min()))
        circuit = grow_multihead(
            circuit, LabeledBatch(data.x[grow_idx], labels[grow_idx]), epsilon, rng=rng, jitter=config.jitter
        )
        head_of_parent = {p: k + t for t, p in enumerate(parents)}
        new_labels = labels.copy()
        for j in range(width):
            members = sel[km_labels == j]
            new_labels[members] = chosen[j] if j < len(chosen) else head_of_parent[parent_of_extra[j - len(chosen)]]
        k += n_add
        if circuit.num_heads != k:
            raise RuntimeError(f"growing produced {circuit.num_heads} heads, expected {k}")
        labels = new_labels
        cmap = ClusterMap.from_labels(data.h, labels, k)
    return ClusterMap.from_labels(data.h, labels, k, previous=cmap.centroids), circuit


def grow_two_level(data: EmbeddedDataset, initial: Circuit, config: GrowConfig, n_outer: int, n_inner: int, rng=None):
    """Pre-cluster into ``n_outer`` groups, then grow each to ``n_inner`` heads.

    The per-group circuits are stacked into one circuit whose heads are
    numbered group by group.
    """
    rng = np.random.default_rng(rng)
    outer, _ = seeded_kmeans(data.h, n_outer, None, config.kmeans_iters)
    inner_config = replace(config, K=n_inner)
    circuits, labels = [], np.zeros(len(data), dtype=np.int64)
    centroids = []
    offset = 0
    for o in range(n_outer):
        idx = np.flatnonzero(outer == o)
        cmap_o, circ_o = progressive_grow(data.subset(idx), initial, inner_config, rng=rng)
        labels[idx] = cmap_o.labels + offset
        centroids.append(cmap_o.centroids)
        circuits.append(circ_o)
        offset += cmap_o.k
    return ClusterMap(np.vstack(centroids), labels), stack_heads(circuits)


# ClusterMap text format:  "CM v1 <k> <dim>", k centroid rows, then "<index> <label>" rows.

def format_cluster_map(cmap: ClusterMap) -> str:
    lines = [f"CM v1 {cmap.k} {cmap.dim}"]
    lines.extend(" ".join(format(float(v), ".17g") for v in row) for row in cmap.centroids)
    lines.extend(f"{i} {int(l)}" for i, l in enumerate(cmap.labels))
    return "\n".join(lines) + "\n"


def parse_cluster_maps(text: str) -> list[ClusterMap]:
    """Parse one or more concatenated ClusterMap blocks."""
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    maps = []
    pos = 0
    while pos < len(lines):
        lineno, header = lines[pos]
        parts = header.split()
        if len(parts) != 4 or parts[:2] != ["CM", "v1"]:
            raise ParseError(f"bad cluster map header {header!r}", line=lineno, offset=None)
        try:
            k, dim = int(parts[2]), int(parts[3])
            cent = np.array([[float(t) for t in lines[pos + 1 + i][1].split()] for i in range(k)])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad centroid block: {exc}", line=lineno) from None
        if cent.shape != (k, dim):
            raise ParseError(f"expected {k} centroids of dimension {dim}", line=lineno)
        pos += 1 + k
        labels = []
        while pos < len(lines) and not lines[pos][1].startswith("CM"):
            lineno, text_line = lines[pos]
            try:
                idx, lab = (int(t) for t in text_line.split())
            except ValueError:
                raise ParseError(f"bad label line {text_line!r}", line=lineno) from None
            if idx != len(labels):
                raise ParseError(f"label lines out of order at index {idx}", line=lineno)
            if not 0 <= lab < k:
                raise ParseError(f"label {lab} outside [0, {k})", line=lineno)
            labels.append(lab)
            pos += 1
        maps.append(ClusterMap(cent, np.array(labels, dtype=np.int64)))
    return maps
