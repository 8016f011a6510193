import itertools
import math

import numpy as np
import pytest

from helpers import random_circuit
from lvdpc.circuit import CircuitBuilder, logsumexp, validate_structure
from lvdpc.em import LabeledBatch, conditional_log_likelihood, train_em
from lvdpc.errors import ParseError
from lvdpc.growing import EmbeddedDataset, GrowConfig, progressive_grow
from lvdpc.lvd import (
    PatchLayout,
    assemble,
    bits_per_dimension,
    elbo,
    entropy_identity_check,
    extract_patches,
    finetune,
    format_dataset,
    gap_report,
    objective_difference,
    parse_dataset,
    reassemble_patches,
    tie_and_train_conditional,
    train_prior,
)
from lvdpc.structure import learn_hclt
from lvdpc.synthetic import PatchMixture


# --- patches ---

def test_single_patch_layout_is_identity():
    layout = PatchLayout((3, 3, 1), (3, 3))
    imgs = np.arange(18).reshape(2, 9)
    (d,) = extract_patches(imgs, np.zeros((2, 1, 4)), layout)
    assert np.array_equal(d.x, imgs)


def test_four_by_four_into_two_by_two():
    layout = PatchLayout((4, 4, 1), (2, 2))
    assert layout.num_patches == 4 and layout.patch_size == 4
    idx = layout.patches
    assert sorted(np.concatenate(idx).tolist()) == list(range(16))
    assert idx[0].tolist() == [0, 1, 4, 5]
    assert idx[3].tolist() == [10, 11, 14, 15]


def test_channels_stay_inside_their_pixel():
    layout = PatchLayout((2, 2, 3), (1, 2))
    assert layout.patches[1].tolist() == [6, 7, 8, 9, 10, 11]


def test_patch_round_trip():
    rng = np.random.default_rng(0)
    layout = PatchLayout((6, 4, 2), (3, 2))
    imgs = rng.integers(0, 256, (100, layout.num_vars))
    parts = extract_patches(imgs, rng.normal(size=(100, layout.num_patches, 3)), layout)
    assert np.array_equal(reassemble_patches([d.x for d in parts], layout), imgs)


def test_layout_errors():
    with pytest.raises(ValueError):
        PatchLayout((5, 4, 1), (2, 2))
    with pytest.raises(ValueError):
        PatchLayout.from_grid(12, (2, 2))
    assert PatchLayout.from_grid(12, (1, 2), image_hw=(3, 4)).patch_shape == (3, 2)
    with pytest.raises(ValueError):
        extract_patches(np.zeros((2, 16)), np.zeros((2, 3, 1)), PatchLayout((4, 4, 1), (2, 2)))


# --- tied conditional ---

def small_config(K, epochs=2):
    return GrowConfig(K=K, epochs=epochs, batch_size=128, hidden_size=4)


def test_tied_training_pools_every_position():
    rng = np.random.default_rng(1)
    N = 60
    parts = [EmbeddedDataset(rng.integers(0, 3, (N, 4)), rng.normal(size=(N, 2))) for _ in range(2)]
    c, maps = tie_and_train_conditional(parts, small_config(2), rng=0, domains=(3,) * 4)
    assert c.num_heads == 2
    assert [len(m.labels) for m in maps] == [N, N]
    assert sum(len(m.labels) for m in maps) == 2 * N
    assert np.array_equal(maps[0].centroids, maps[1].centroids)


def test_identical_positions_get_identical_labels():
    rng = np.random.default_rng(2)
    d = EmbeddedDataset(rng.integers(0, 3, (80, 4)), rng.normal(size=(80, 2)) * 4)
    c, maps = tie_and_train_conditional([d, d], small_config(3), rng=0, domains=(3,) * 4)
    np.testing.assert_array_equal(np.bincount(maps[0].labels, minlength=3), np.bincount(maps[1].labels, minlength=3))


def test_tied_beats_untied_when_data_is_scarce():
    wins = 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        gt = PatchMixture.random(rng, image_hw=(4, 4))
        xi, emb, _ = gt.sample(200, rng)
        xt, et, _ = gt.sample(500, rng)
        tr = extract_patches(xi, emb, gt.layout)
        te = extract_patches(xt, et, gt.layout)
        cfg = GrowConfig(K=8, epochs=5, batch_size=128)
        c, maps = tie_and_train_conditional(tr, cfg, rng=seed, domains=(8,) * 4)
        tied = np.mean([conditional_log_likelihood(c, LabeledBatch(d.x, maps[0].assign(d.h))).mean() for d in te])
        untied = []
        for d, t in zip(tr, te):
            cm, ci = progressive_grow(d, learn_hclt(d.x, 16, 1, (8,) * 4, rng=seed), cfg, rng=seed)
            untied.append(conditional_log_likelihood(ci, LabeledBatch(t.x, cm.assign(t.h))).mean())
        wins += tied >= np.mean(untied)
    assert wins >= 4


# --- latent prior ---

def test_single_position_prior_matches_frequencies():
    rng = np.random.default_rng(3)
    z = rng.choice(4, size=(2000, 1), p=[0.1, 0.2, 0.3, 0.4])
    prior = train_prior(z, 4, hidden_size=3, epochs=20, rng=0)
    p = np.exp(prior.head_log_likelihoods(np.arange(4)[:, None])[:, 0])
    freq = np.bincount(z[:, 0], minlength=4) / len(z)
    np.testing.assert_allclose(p, freq, atol=1e-3)


def test_independent_uniform_latents():
    rng = np.random.default_rng(4)
    z = rng.integers(0, 2, (10_000, 2))
    prior = train_prior(z, 2, hidden_size=4, rng=0)
    grids = np.array(list(itertools.product(range(2), repeat=2)))
    p = np.exp(prior.head_log_likelihoods(grids)[:, 0])
    assert np.abs(p - 0.25).max() < 0.02
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_correlated_latents():
    rng = np.random.default_rng(5)
    a = rng.integers(0, 3, 2000)
    prior = train_prior(np.stack([a, a], axis=1), 3, hidden_size=4, rng=0)
    grids = np.array(list(itertools.product(range(3), repeat=2)))
    p = np.exp(prior.head_log_likelihoods(grids)[:, 0])
    assert p[grids[:, 0] == grids[:, 1]].sum() >= 0.95


def test_prior_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        train_prior(np.array([[0, 3]]), 3)


# --- assembly ---

def toy_model(seed, K=2, layout=None, domain=2):
    rng = np.random.default_rng(seed)
    layout = layout or PatchLayout((2, 2, 1), (1, 2))
    cond = random_circuit(rng, layout.patch_size, domain=domain, num_heads=K)
    prior = random_circuit(rng, layout.num_patches, domain=K)
    return assemble(prior, cond, layout)


def brute_assembled(model, x):
    K = model.conditional.num_heads
    P = model.layout.num_patches
    grids = np.array(list(itertools.product(range(K), repeat=P)))
    log_pz = model.prior.head_log_likelihoods(grids)[:, 0]
    x = np.asarray(x)
    terms = log_pz[None, :].repeat(len(x), 0)
    for i, idx in enumerate(model.layout.patches):
        terms += model.conditional.head_log_likelihoods(x[:, idx])[:, grids[:, i]]
    return logsumexp(terms, axis=1)


def test_assembled_single_position():
    rng = np.random.default_rng(6)
    layout = PatchLayout((1, 3, 1), (1, 3))
    cond = random_circuit(rng, 3, domain=3, num_heads=3)
    prior = train_prior(rng.integers(0, 3, (50, 1)), 3, hidden_size=2, rng=0)
    model = assemble(prior, cond, layout)
    x = rng.integers(0, 3, (20, 3))
    log_pz = prior.head_log_likelihoods(np.arange(3)[:, None])[:, 0]
    want = logsumexp(log_pz[None, :] + cond.head_log_likelihoods(x), axis=1)
    np.testing.assert_allclose(model.circuit.head_log_likelihoods(x)[:, 0], want, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_assembled_matches_enumeration_over_latent_grids(seed):
    model = toy_model(seed)
    assert validate_structure(model.circuit).ok
    x = np.array(list(itertools.product(range(2), repeat=4)))
    np.testing.assert_allclose(model.circuit.head_log_likelihoods(x)[:, 0], brute_assembled(model, x), atol=1e-9)


def test_assembled_mass_is_one():
    model = toy_model(7, K=3, layout=PatchLayout((2, 3, 1), (1, 3)))
    x = np.array(list(itertools.product(range(2), repeat=6)))
    total = np.exp(model.circuit.head_log_likelihoods(x)[:, 0]).sum()
    assert total == pytest.approx(1.0, abs=1e-9)


def test_assembly_checks_shapes():
    rng = np.random.default_rng(8)
    layout = PatchLayout((2, 2, 1), (1, 2))
    cond = random_circuit(rng, 2, num_heads=2)
    with pytest.raises(ValueError):
        assemble(random_circuit(rng, 3, domain=2), cond, layout)
    with pytest.raises(ValueError):
        assemble(random_circuit(rng, 2, domain=3), cond, layout)


# --- finetuning ---

def pipeline(seed=0, n_train=600):
    rng = np.random.default_rng(seed)
    gt = PatchMixture.random(rng, image_hw=(4, 4))
    xi, emb, _ = gt.sample(n_train, rng)
    xt, _, _ = gt.sample(400, rng)
    parts = extract_patches(xi, emb, gt.layout)
    c, maps = tie_and_train_conditional(parts, GrowConfig(K=4, epochs=4, batch_size=256), rng=seed, domains=(8,) * 4)
    z = np.stack([m.labels for m in maps], axis=1)
    prior = train_prior(z, 4, gt.layout, hidden_size=4, rng=seed)
    return assemble(prior, c, gt.layout), xi, xt, z


def test_finetune_zero_epochs_is_identity():
    model, xi, _, _ = pipeline()
    assert finetune(model, xi, 0) is model


def test_finetune_is_monotone_and_helps_held_out():
    model, xi, xt, _ = pipeline()
    tuned = finetune(model, xi, 4)
    lls = [v for _, v in tuned.finetune_trace]
    assert (np.diff(lls) >= -1e-8).all()
    assert bits_per_dimension(tuned, xt) < bits_per_dimension(model, xt)
    assert tuned.finetuned and not model.finetuned


def test_finetune_keeps_copies_tied():
    model, xi, _, _ = pipeline()
    tuned = finetune(model, xi, 2)
    w = tuned.circuit.sum_weights
    g = model.ties.edge_groups
    for grp in np.unique(g)[:50]:
        members = w[g == grp]
        assert np.ptp(members) < 1e-12


# --- gaps and bpd ---

def test_gap_is_non_negative_and_consistent():
    model, xi, _, z = pipeline()
    rep = gap_report(model, xi, z)
    assert rep.variational_gap >= 0
    assert rep.variational_gap == rep.true_ll - rep.lvd_objective
    assert rep.true_ll == pytest.approx(model.circuit.head_log_likelihoods(xi)[:, 0].sum(), rel=1e-12)
    for seed in range(5):
        m = toy_model(seed)
        x = np.array(list(itertools.product(range(2), repeat=4)))
        zz = np.random.default_rng(seed).integers(0, 2, (len(x), 2))
        assert gap_report(m, x, zz).variational_gap >= 0


def test_gap_with_one_cluster_is_exactly_zero():
    rng = np.random.default_rng(9)
    layout = PatchLayout((2, 2, 1), (1, 2))
    cond = random_circuit(rng, 2, num_heads=1)
    z = np.zeros((30, 2), dtype=np.int64)
    prior = train_prior(z, 1, layout, hidden_size=2, rng=0)
    model = assemble(prior, cond, layout)
    x = rng.integers(0, 2, (30, 4))
    assert gap_report(model, x, z).variational_gap == 0.0


def test_student_likelihood_exceeds_teacher_elbo():
    # teacher: p(z), p(x|z) as a 2-component model over 3 binary pixels, with an
    # encoder q(z|x) that is not the true posterior; the student PC encodes the
    # same generative model exactly, so its log p(x) strictly beats the ELBO
    layout = PatchLayout((1, 3, 1), (1, 3))
    b = CircuitBuilder((2, 2, 2))
    heads = []
    for t in ([0.9, 0.8, 0.7], [0.2, 0.3, 0.1]):
        leaves = [b.input(v, [1 - p, p]) for v, p in enumerate(t)]
        heads.append(b.sum([b.product(leaves)], [1.0]))
    cond = b.build(heads)
    pb = CircuitBuilder((2,))
    prior = pb.build([pb.sum([pb.input(0, [0.6, 0.4])], [1.0])])
    model = assemble(prior, cond, layout)
    x = np.array(list(itertools.product(range(2), repeat=3)))
    log_px_z = cond.head_log_likelihoods(x)
    q = np.where(x.sum(axis=1, keepdims=True) >= 2, [0.8, 0.2], [0.3, 0.7])
    teacher = elbo(log_px_z, np.log([0.6, 0.4]), q)
    student = model.circuit.head_log_likelihoods(x)[:, 0]
    assert (student > teacher).all()
    # the ELBO is tight when q is the exact posterior
    post = np.exp(log_px_z + np.log([0.6, 0.4]) - student[:, None])
    np.testing.assert_allclose(elbo(log_px_z, np.log([0.6, 0.4]), post), student, atol=1e-12)


def test_uniform_model_has_eight_bits_per_dimension():
    b = CircuitBuilder((256,) * 16)
    leaves = [b.input(v, np.full(256, 1 / 256)) for v in range(16)]
    c = b.build([b.sum([b.product(leaves)], [1.0])])
    x = np.random.default_rng(10).integers(0, 256, (7, 16))
    assert bits_per_dimension(c, x) == 8.0


def test_point_mass_model_has_near_zero_bpd():
    rng = np.random.default_rng(11)
    img = rng.integers(0, 256, 16)
    x = np.tile(img, (1000, 1))
    c = learn_hclt(x, 2, domains=(256,) * 16, rng=0)
    c, _ = train_em(c, LabeledBatch.unlabeled(x), 3, None, 1.0, 1.0)
    assert bits_per_dimension(c, x[:5]) < 0.1


# --- entropy identity ---

def small_joint(seed, K=2):
    model = toy_model(seed, K=K)
    x = np.array(list(itertools.product(range(2), repeat=4)))
    return model, x


def test_difference_is_zero_for_deterministic_posteriors():
    model, x = small_joint(12)
    q = np.zeros((len(x), 2, 2))
    q[:, 0, 0] = 1.0
    q[:, 1, 1] = 1.0
    diff = objective_difference(model.prior, model.conditional, model.layout, x, q)
    assert np.abs(diff).max() < 1e-12


def test_difference_is_minus_log_k_per_latent_for_uniform_posteriors():
    model, x = small_joint(13, K=4)
    q = np.full((len(x), 2, 4), 0.25)
    diff = objective_difference(model.prior, model.conditional, model.layout, x, q)
    np.testing.assert_allclose(diff, -2 * math.log(4), atol=1e-12)


def test_difference_is_invariant_under_reparameterization():
    rng = np.random.default_rng(14)
    model, x = small_joint(14, K=3)
    q = rng.dirichlet(np.ones(3), size=(len(x), 2))
    assert entropy_identity_check(model, x, q, n_reparam=50, rng=1) < 1e-9


# --- dataset format ---

def test_dataset_round_trip():
    rng = np.random.default_rng(15)
    imgs = rng.integers(0, 256, (3, 16))
    emb = rng.normal(size=(3, 4, 2))
    back = parse_dataset(format_dataset(imgs, emb, (2, 2)))
    assert np.array_equal(back[0], imgs)
    assert back[1].tobytes() == emb.tobytes()
    assert back[2] == (2, 2)


@pytest.mark.parametrize(
    "text",
    ["", "DS v2 1 2 1 1 1\n0 0\n0.5\n", "DS v1 1 2 1 1 1\n0 0\n", "DS v1 1 2 1 1 1\n0\n0.5\n",
     "DS v1 1 2 1 1 1\n0 0\n0.5 0.5\n"],
)
def test_dataset_parse_errors(text):
    with pytest.raises(ParseError):
        parse_dataset(text)
