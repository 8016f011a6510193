"""Random circuit generators and slow pure-Python oracles used by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np

from lvdpc.circuit import UNKNOWN, Circuit, CircuitBuilder


def random_circuit(rng, num_vars, domain=2, num_heads=1, max_children=3, share=0.3, max_depth=4):
    """Random smooth, decomposable, alternating circuit over ``num_vars`` variables.

    Sum units over a scope are sometimes reused by later parents, so the
    result is a DAG rather than a tree.
    """
    rng = np.random.default_rng(rng)
    domains = (domain,) * num_vars if np.isscalar(domain) else tuple(domain)
    b = CircuitBuilder(domains)
    pool: dict[tuple[int, ...], list[int]] = {}

    def leaf(v):
        return b.input(v, rng.dirichlet(np.ones(domains[v])))

    def child_of_product(scope, depth):
        if len(scope) == 1 and rng.random() < 0.5:
            return leaf(scope[0])
        return sum_unit(scope, depth + 1)

    def product(scope, depth):
        scope = list(scope)
        rng.shuffle(scope)
        if len(scope) == 1 or depth >= max_depth:
            parts = [[v] for v in scope]
        else:
            k = int(rng.integers(2, min(len(scope), 3) + 1))
            cuts = sorted(rng.choice(np.arange(1, len(scope)), size=k - 1, replace=False))
            parts = [list(p) for p in np.split(np.array(scope), cuts)]
        return b.product([child_of_product(tuple(sorted(p)), depth) for p in parts])

    def sum_unit(scope, depth):
        known = pool.get(scope)
        if known and rng.random() < share:
            return int(rng.choice(known))
        k = int(rng.integers(1, max_children + 1))
        if len(scope) == 1 and rng.random() < 0.5:
            ch = [leaf(scope[0]) for _ in range(k)]
        else:
            ch = [product(scope, depth) for _ in range(k)]
        u = b.sum(ch, rng.dirichlet(np.ones(k)))
        pool.setdefault(scope, []).append(u)
        return u

    scope = tuple(range(num_vars))
    roots = [sum_unit(scope, 0) for _ in range(num_heads)]
    return b.build(roots)


def brute_values(circuit: Circuit, x) -> list[float]:
    """Probability of every unit for one sample, unknown entries summed out."""
    vals = []
    for u in range(circuit.num_units):
        k = circuit.kind(u)
        if k == "input":
            v = x[circuit.var(u)]
            vals.append(1.0 if v == UNKNOWN else float(circuit.probs(u)[v]))
        elif k == "product":
            vals.append(math.prod(vals[c] for c in circuit.children(u)))
        else:
            vals.append(sum(float(w) * vals[c] for w, c in zip(circuit.weights(u), circuit.children(u))))
    return vals


def brute_log_likelihood(circuit: Circuit, x, head=0) -> float:
    p = brute_values(circuit, list(x))[circuit.roots[head]]
    return math.log(p) if p > 0 else -math.inf


def brute_log_marginal(circuit: Circuit, e, head=0) -> float:
    """Marginal by explicit enumeration of every completion of ``e``."""
    e = list(e)
    hidden = [v for v, val in enumerate(e) if val == UNKNOWN]
    total = 0.0
    for vals in itertools.product(*(range(circuit.domains[v]) for v in hidden)):
        x = list(e)
        for v, val in zip(hidden, vals):
            x[v] = val
        total += brute_values(circuit, x)[circuit.roots[head]]
    return math.log(total) if total > 0 else -math.inf


def brute_flows(circuit: Circuit, xs, labels):
    """Unit, edge and leaf flows accumulated one sample at a time."""
    node = np.zeros(circuit.num_units)
    edge = np.zeros(circuit.num_sum_edges)
    leaf = np.zeros(len(circuit.leaf_probs))
    for x, lab in zip(xs, labels):
        vals = brute_values(circuit, list(x))
        F = [0.0] * circuit.num_units
        F[circuit.roots[lab]] = 1.0
        for u in reversed(range(circuit.num_units)):
            k = circuit.kind(u)
            node[u] += F[u]
            if k == "input":
                leaf[circuit.leaf_start[u] + x[circuit.var(u)]] += F[u]
            elif k == "product":
                for c in circuit.children(u):
                    F[c] += F[u]
            elif F[u] > 0:
                for j, (w, c) in enumerate(zip(circuit.weights(u), circuit.children(u))):
                    f = float(w) * vals[c] / vals[u] * F[u]
                    edge[circuit.edge_start[u] + j] += f
                    F[c] += f
    return node, edge, leaf
