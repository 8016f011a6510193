"""Circuit flows, EM parameter learning and flow-based pruning."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .circuit import DEFAULT_CHUNK, Circuit, _Params, subcircuit
from .errors import StructureError, ZeroProbabilityError

EDGE_PSEUDOCOUNT = 1e-4
LEAF_PSEUDOCOUNT = 0.1


@dataclass
class LabeledBatch:
    """Fully observed samples with the head (cluster) each one belongs to."""

    x: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.ndim != 2 or self.labels.shape != (self.x.shape[0],):
            raise ValueError("labels must align with the rows of x")

    @classmethod
    def unlabeled(cls, x):
        x = np.asarray(x)
        return cls(x, np.zeros(len(x), dtype=np.int64))

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.x[idx], self.labels[idx])


@dataclass
class FlowTable:
    """Flows accumulated over a dataset.

    ``node[n]`` is F_n(D); ``edge[e]`` the flow through sum edge ``e`` in the
    circuit's flat edge order; ``leaf[i]`` the flow of each input unit on
    each value of its variable (the leaf EM counts).
    """

    node: np.ndarray
    edge: np.ndarray
    leaf: np.ndarray
    num_samples: int
    log_likelihood: float

    def __add__(self, other: "FlowTable") -> "FlowTable":
        return FlowTable(
            self.node + other.node,
            self.edge + other.edge,
            self.leaf + other.leaf,
            self.num_samples + other.num_samples,
            self.log_likelihood + other.log_likelihood,
        )


@dataclass(frozen=True)
class Ties:
    """Parameter tying: flat edges / leaf entries sharing a group id share statistics."""

    edge_groups: np.ndarray
    leaf_groups: np.ndarray


def _require_valid(circuit: Circuit):
    rep = circuit.report
    if not rep.ok:
        raise StructureError("flows need a smooth, decomposable, alternating circuit: " + "; ".join(rep.messages))


def _check_labels(circuit, batch):
    if len(batch) and (batch.labels.min() < 0 or batch.labels.max() >= circuit.num_heads):
        raise ValueError(f"labels must lie in [0, {circuit.num_heads})")
    if batch.x.shape[1] != circuit.num_vars:
        raise ValueError(f"samples have {batch.x.shape[1]} variables, circuit has {circuit.num_vars}")


def compute_flows(circuit: Circuit, batch: LabeledBatch, chunk: int = DEFAULT_CHUNK) -> FlowTable:
    """Forward/backward pass accumulating circuit flows over ``batch``.

    The root of each sample's labeled head receives flow 1, all other roots 0.
    Raises :class:`ZeroProbabilityError` for a sample its head cannot produce.
    """
    _require_valid(circuit)
    _check_labels(circuit, batch)
    x = circuit.check_evidence(batch.x, allow_unknown=False)
    plan = circuit._s.plan
    params = _Params(circuit)
    roots = np.asarray(circuit.roots)
    node = np.zeros(circuit.num_units)
    edge = np.zeros(circuit.num_sum_edges)
    leaf = np.zeros(len(circuit.leaf_probs))
    total_ll = 0.0
    for a in range(0, len(batch), chunk):
        xb = x[a : a + chunk]
        lab = batch.labels[a : a + chunk]
        B = len(xb)
        cols = np.arange(B)
        L, cache = circuit._forward(xb, params, keep=True)
        head_ll = L[roots[lab], cols]
        if np.isneginf(head_ll).any():
            i = int(np.flatnonzero(np.isneginf(head_ll))[0])
            raise ZeroProbabilityError(a + i, int(lab[i]))
        total_ll += float(head_ll.sum())
        F = np.zeros_like(L)
        np.add.at(F, (roots[lab], cols), 1.0)
        circuit._backward(L, cache, F, params, edge)
        F = F[:-1]
        node += F.sum(axis=1)
        if plan.leaf_ids.size:
            idx = plan.leaf_off[:, None] + xb.T[plan.leaf_var]
            leaf += np.bincount(idx.ravel(), weights=F[plan.leaf_ids].ravel(), minlength=len(leaf))
    return FlowTable(node, edge, leaf, len(batch), total_ll)


def _segment_normalize(values, starts):
    totals = np.add.reduceat(values, starts)
    counts = np.diff(np.append(starts, len(values)))
    return values / np.repeat(totals, counts)


def em_update(
    circuit: Circuit,
    flows: FlowTable,
    step_size: float,
    leaf_pseudocount: float = LEAF_PSEUDOCOUNT,
    edge_pseudocount: float = EDGE_PSEUDOCOUNT,
    ties: Ties | None = None,
) -> Circuit:
    """One stepwise EM update: ``theta <- (1 - step) theta + step theta*``.

    ``theta*`` is the flow-normalized target with pseudocounts added; with
    ``step_size == 1`` over the full dataset this is an exact EM step.
    """
    if not 0.0 < step_size <= 1.0:
        raise ValueError(f"step size must lie in (0, 1], got {step_size}")
    if flows.edge.shape != circuit.sum_weights.shape or flows.leaf.shape != circuit.leaf_probs.shape:
        raise ValueError("flow table was computed for a different circuit")
    kinds = circuit.kinds
    new_w = circuit.sum_weights
    if len(new_w):
        stats = flows.edge + edge_pseudocount
        if ties is not None:
            stats = np.bincount(ties.edge_groups, weights=stats)[ties.edge_groups]
        starts = circuit.edge_start[np.flatnonzero(kinds == 1)]
        target = _segment_normalize(stats, starts)
        new_w = _segment_normalize((1.0 - step_size) * new_w + step_size * target, starts)
    new_p = circuit.leaf_probs
    if len(new_p):
        stats = flows.leaf + leaf_pseudocount
        if ties is not None:
            stats = np.bincount(ties.leaf_groups, weights=stats)[ties.leaf_groups]
        starts = circuit.leaf_start[np.flatnonzero(kinds == 0)]
        target = _segment_normalize(stats, starts)
        new_p = _segment_normalize((1.0 - step_size) * new_p + step_size * target, starts)
    return circuit.with_parameters(new_w, new_p, check=False)


def annealed_step_sizes(epochs: int, lr_start: float, lr_end: float) -> np.ndarray:
    if epochs <= 1:
        return np.full(max(epochs, 0), lr_start)
    return np.linspace(lr_start, lr_end, epochs)


def train_em(
    circuit: Circuit,
    data: LabeledBatch,
    epochs: int = 50,
    batch_size: int | None = 256,
    lr_start: float = 0.1,
    lr_end: float = 0.01,
    rng=None,
    leaf_pseudocount: float = LEAF_PSEUDOCOUNT,
    edge_pseudocount: float = EDGE_PSEUDOCOUNT,
    ties: Ties | None = None,
):
    """Mini-batch EM with the step size annealed linearly across epochs.

    Returns ``(circuit, trace)`` where ``trace`` holds ``(epoch, mean_ll)``;
    the mean is taken over the epoch's mini-batches before each update.
    ``batch_size=None`` runs full-batch EM.
    """
    rng = np.random.default_rng(rng)
    trace: list[tuple[int, float]] = []
    n = len(data)
    if n == 0:
        return circuit, trace
    bs = n if batch_size is None else min(batch_size, n)
    for epoch, eta in enumerate(annealed_step_sizes(epochs, lr_start, lr_end)):
        order = rng.permutation(n) if bs < n else np.arange(n)
        ll = 0.0
        for a in range(0, n, bs):
            flows = compute_flows(circuit, data.subset(order[a : a + bs]))
            ll += flows.log_likelihood
            circuit = em_update(circuit, flows, float(eta), leaf_pseudocount, edge_pseudocount, ties)
        trace.append((epoch, ll / n))
    return circuit, trace


def conditional_log_likelihood(circuit: Circuit, data: LabeledBatch) -> np.ndarray:
    """``log p(x | Z = label)`` for every sample."""
    _check_labels(circuit, data)
    heads = circuit.head_log_likelihoods(data.x)
    return heads[np.arange(len(data)), data.labels]


def flow_conservation_error(circuit: Circuit, flows: FlowTable) -> float:
    """Largest relative gap between a sum unit's flow and its outgoing edge flows."""
    sums = np.flatnonzero(circuit.kinds == 1)
    if not len(sums):
        return 0.0
    out = np.add.reduceat(flows.edge, circuit.edge_start[sums])
    f = flows.node[sums]
    live = f > 0
    if not live.any():
        return float(np.abs(out).max())
    return float(np.max(np.abs(out[live] - f[live]) / f[live]))


def prune(circuit: Circuit, data: LabeledBatch, keep_fraction: float, flows: FlowTable | None = None) -> Circuit:
    """Drop the sum edges carrying the least aggregate flow on ``data``.

    Keeps ``ceil(keep_fraction * E)`` sum edges, never removing a sum unit's
    best edge; surviving weights are renormalized and unreachable units
    dropped. Ties in flow go to the edge earlier in the flat edge order.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if flows is None:
        flows = compute_flows(circuit, data)
    E = circuit.num_sum_edges
    n_remove = E - math.ceil(keep_fraction * E)
    if n_remove <= 0:
        return circuit
    protected = np.zeros(E, dtype=bool)
    starts = circuit.edge_start
    for u in np.flatnonzero(circuit.kinds == 1):
        a = starts[u]
        protected[a + int(np.argmax(flows.edge[a : starts[u + 1]]))] = True
    order = np.argsort(flows.edge, kind="stable")
    candidates = order[~protected[order]][:n_remove]
    keep = np.ones(E, dtype=bool)
    keep[candidates] = False
    return subcircuit(circuit, edge_keep=keep)


def format_ll_trace(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_ll_nats"])
    for epoch, ll in trace:
        w.writerow([epoch, format(ll, ".17g")])
    return buf.getvalue()
