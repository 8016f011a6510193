import itertools
import math

import numpy as np
import pytest

from helpers import brute_log_likelihood
from lvdpc.circuit import log_likelihood, validate_structure
from lvdpc.structure import (
    TreeStructure,
    build_hclt,
    chow_liu_tree,
    infer_domains,
    learn_hclt,
    pairwise_mutual_information,
)


def prufer_tree(seq, n):
    """Edges of the labeled tree encoded by a Pruefer sequence."""
    degree = [1] * n
    for v in seq:
        degree[v] += 1
    edges = []
    for v in seq:
        leaf = min(u for u in range(n) if degree[u] == 1)
        edges.append((min(leaf, v), max(leaf, v)))
        degree[leaf] -= 1
        degree[v] -= 1
    a, b = [u for u in range(n) if degree[u] == 1]
    edges.append((a, b))
    return edges


def tree_weight(edges, mi):
    return sum(mi[i, j] for i, j in edges)


def test_independent_columns_have_small_mi():
    rng = np.random.default_rng(0)
    data = rng.integers(0, 2, (10_000, 2))
    assert pairwise_mutual_information(data)[0, 1] < 0.01


def test_identical_columns_approach_ln2():
    rng = np.random.default_rng(1)
    a = np.repeat([0, 1], 5000)
    rng.shuffle(a)
    data = np.stack([a, a], axis=1)
    mi = pairwise_mutual_information(data, smoothing=1e-9)
    assert mi[0, 1] == pytest.approx(math.log(2), abs=1e-6)


def test_mi_matches_hand_computation():
    data = np.array([[0, 0, 0], [0, 1, 1], [1, 1, 0], [1, 1, 1]])
    mi = pairwise_mutual_information(data, smoothing=1.0)
    # pair (0, 1): smoothed joint (2, 2, 1, 3) / 8, marginals (1/2, 1/2) and (3/8, 5/8)
    hand01 = (
        0.25 * math.log(0.25 / (0.5 * 0.375))
        + 0.25 * math.log(0.25 / (0.5 * 0.625))
        + 0.125 * math.log(0.125 / (0.5 * 0.375))
        + 0.375 * math.log(0.375 / (0.5 * 0.625))
    )
    # pair (0, 2): counts (1, 1, 1, 1) -> uniform smoothed joint, independent
    assert mi[0, 1] == pytest.approx(hand01, abs=1e-12)
    assert mi[0, 2] == pytest.approx(0.0, abs=1e-12)
    assert np.array_equal(mi, mi.T)
    assert (mi >= 0).all()


def test_constant_column_gives_zero_row():
    rng = np.random.default_rng(2)
    data = rng.integers(0, 3, (100, 3))
    data[:, 1] = 2
    mi = pairwise_mutual_information(data)
    assert np.allclose(mi[1], 0.0)


def test_mi_rejects_bad_inputs():
    with pytest.raises(ValueError):
        pairwise_mutual_information(np.zeros((1, 3), dtype=int))
    with pytest.raises(ValueError):
        pairwise_mutual_information(np.zeros((5, 3), dtype=int), smoothing=0.0)


def test_two_variable_tree():
    t = chow_liu_tree(np.array([[0.0, 0.3], [0.3, 0.0]]))
    assert t.edges() == {(0, 1)}
    assert t.root == 0 and t.parent == (-1, 0)


def test_chain_data_recovers_chain():
    rng = np.random.default_rng(3)
    n = 20_000
    x0 = rng.integers(0, 2, n)
    x1 = np.where(rng.random(n) < 0.9, x0, 1 - x0)
    x2 = np.where(rng.random(n) < 0.9, x1, 1 - x1)
    mi = pairwise_mutual_information(np.stack([x0, x1, x2], axis=1))
    assert mi[0, 2] < min(mi[0, 1], mi[1, 2])
    assert chow_liu_tree(mi).edges() == {(0, 1), (1, 2)}


def test_equal_mi_tie_break_is_deterministic():
    mi = np.ones((5, 5))
    trees = {chow_liu_tree(mi, root=2) for _ in range(5)}
    assert len(trees) == 1
    # lexicographically smallest edges first: a star around variable 0
    assert trees.pop().edges() == {(0, 1), (0, 2), (0, 3), (0, 4)}


def test_chow_liu_is_the_maximum_spanning_tree():
    rng = np.random.default_rng(4)
    n = 5
    for _ in range(10):
        a = rng.random((n, n))
        mi = np.triu(a, 1) + np.triu(a, 1).T
        best = max(tree_weight(prufer_tree(s, n), mi) for s in itertools.product(range(n), repeat=n - 2))
        assert chow_liu_tree(mi).weight(mi) == pytest.approx(best, abs=1e-12)


def test_chow_liu_beats_random_spanning_trees():
    rng = np.random.default_rng(5)
    n = 9
    data = rng.integers(0, 3, (500, n))
    data[:, 3] = data[:, 0]
    mi = pairwise_mutual_information(data)
    w = chow_liu_tree(mi).weight(mi)
    for _ in range(1000):
        seq = rng.integers(0, n, n - 2)
        assert tree_weight(prufer_tree(seq, n), mi) <= w + 1e-12


def test_tree_structure_helpers():
    t = chow_liu_tree(np.array([[0, 1, 0.1], [1, 0, 0.5], [0.1, 0.5, 0]]), root=1)
    assert t.root == 1 and t.num_nodes == 3
    assert sorted(t.children(1)) == [0, 2]
    assert t.order[0] == 1


def test_hclt_hidden_one_is_fully_factorized():
    rng = np.random.default_rng(6)
    data = rng.integers(0, 3, (200, 4))
    c = learn_hclt(data, hidden_size=1, rng=rng)
    x = rng.integers(0, 3, (20, 4))
    leaves = [u for u in range(c.num_units) if c.kind(u) == "input"]
    by_var = {c.var(u): c.probs(u) for u in leaves}
    want = sum(np.log(by_var[v][x[:, v]]) for v in range(4))
    np.testing.assert_allclose(log_likelihood(c, x), want, rtol=1e-12)


def test_hclt_total_mass_is_one():
    rng = np.random.default_rng(7)
    mi = pairwise_mutual_information(rng.integers(0, 2, (100, 5)))
    c = build_hclt(chow_liu_tree(mi), 4, 1, (2,) * 5, rng=rng)
    assert validate_structure(c).ok
    total = sum(math.exp(brute_log_likelihood(c, x)) for x in itertools.product((0, 1), repeat=5))
    assert total == pytest.approx(1.0, abs=1e-9)


def test_hclt_head_count_and_scopes():
    c = learn_hclt(np.random.default_rng(8).integers(0, 2, (50, 4)), 3, num_heads=3, rng=0)
    assert c.num_heads == 3
    assert all(c.kind(r) == "sum" for r in c.roots)
    assert len({c.scope(r) for r in c.roots}) == 1


def test_hclt_unit_and_edge_counts():
    rng = np.random.default_rng(9)
    V, H, heads = 6, 5, 2
    tree = chow_liu_tree(pairwise_mutual_information(rng.integers(0, 2, (80, V))))
    c = build_hclt(tree, H, heads, (2,) * V, rng=rng)
    n_child = [len(tree.children(v)) for v in range(V)]
    assert c.num_units == V * H * 2 + (V - 1) * H + heads
    assert c.num_sum_edges == (V - 1) * H * H + heads * H
    assert c.num_edges == c.num_sum_edges + sum(H * (1 + k) for k in n_child)


def test_hclt_always_valid():
    rng = np.random.default_rng(10)
    for _ in range(50):
        V = int(rng.integers(1, 8))
        d = int(rng.integers(2, 4))
        data = rng.integers(0, d, (30, V))
        c = learn_hclt(data, int(rng.integers(1, 5)), int(rng.integers(1, 4)), (d,) * V, rng=rng)
        assert validate_structure(c).ok


def test_hclt_leaf_initialization_near_marginals():
    rng = np.random.default_rng(11)
    data = rng.integers(0, 4, (400, 3))
    c = learn_hclt(data, 6, rng=rng)
    for u in range(c.num_units):
        if c.kind(u) == "input":
            v = c.var(u)
            counts = np.bincount(data[:, v], minlength=4)
            marginal = (counts + 1.0) / (counts.sum() + 4.0)
            ratio = c.probs(u) / marginal
            assert ratio.min() >= 0.95 / 1.05 - 1e-12 and ratio.max() <= 1.05 / 0.95 + 1e-12
            assert c.probs(u).sum() == pytest.approx(1.0, abs=1e-12)


def test_hclt_is_seeded():
    data = np.random.default_rng(12).integers(0, 2, (60, 4))
    a = learn_hclt(data, 3, rng=5)
    b = learn_hclt(data, 3, rng=5)
    assert np.array_equal(a.sum_weights, b.sum_weights)
    assert np.array_equal(a.leaf_probs, b.leaf_probs)


def test_infer_domains_and_bad_arguments():
    assert infer_domains(np.array([[0, 2], [1, 0]])) == (2, 3)
    tree = TreeStructure((-1, 0), (0, 1))
    with pytest.raises(ValueError):
        build_hclt(tree, 0, 1, (2, 2))
    with pytest.raises(ValueError):
        build_hclt(tree, 2, 1, (2,))
