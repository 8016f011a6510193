"""Image pipeline: patches, tied cluster-conditioned circuits, latent prior,
assembly into one circuit over pixels, finetuning and evaluation."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import xlogy

from .circuit import Circuit, CircuitBuilder, logsumexp, reachable_units, subcircuit
from .em import LabeledBatch, Ties, train_em
from .errors import ParseError
from .growing import ClusterMap, EmbeddedDataset, GrowConfig, grow_two_level, progressive_grow
from .serialize import atomic_write
from .structure import build_hclt, chow_liu_tree, learn_hclt, pairwise_mutual_information


@dataclass(frozen=True)
class PatchLayout:
    """Partition of an ``H x W x C`` image into a grid of equal patches.

    Pixel ``(r, c, ch)`` is variable ``(r * W + c) * C + ch``. Patches are
    numbered row-major over the grid; inside a patch variables are ordered
    row, column, channel, so every patch lines up with the shared
    conditional circuit.
    """

    image_shape: tuple[int, int, int]
    patch_shape: tuple[int, int]

    def __post_init__(self):
        H, W, C = self.image_shape
        ph, pw = self.patch_shape
        if min(H, W, C, ph, pw) < 1 or H % ph or W % pw:
            raise ValueError(f"patch {self.patch_shape} does not tile image {self.image_shape}")

    @classmethod
    def from_grid(cls, num_vars: int, grid: tuple[int, int], channels: int = 1, image_hw=None):
        if image_hw is None:
            side = math.isqrt(num_vars // channels)
            if side * side * channels != num_vars:
                raise ValueError("cannot infer a square image shape; pass image_hw")
            image_hw = (side, side)
        H, W = image_hw
        gh, gw = grid
        if H % gh or W % gw or H * W * channels != num_vars:
            raise ValueError(f"grid {grid} does not tile image {H}x{W}x{channels}")
        return cls((H, W, channels), (H // gh, W // gw))

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_shape[0] // self.patch_shape[0], self.image_shape[1] // self.patch_shape[1]

    @property
    def num_vars(self) -> int:
        H, W, C = self.image_shape
        return H * W * C

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_size(self) -> int:
        return self.patch_shape[0] * self.patch_shape[1] * self.image_shape[2]

    @property
    def patches(self) -> list[np.ndarray]:
        H, W, C = self.image_shape
        ph, pw = self.patch_shape
        gh, gw = self.grid
        out = []
        for gr in range(gh):
            for gc in range(gw):
                idx = [
                    ((gr * ph + r) * W + gc * pw + c) * C + ch
                    for r in range(ph)
                    for c in range(pw)
                    for ch in range(C)
                ]
                out.append(np.array(idx, dtype=np.int64))
        return out


def extract_patches(images, embeddings, layout: PatchLayout) -> list[EmbeddedDataset]:
    """One dataset per grid position pairing patch pixels with that position's embedding."""
    images = np.asarray(images)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if images.ndim != 2 or images.shape[1] != layout.num_vars:
        raise ValueError(f"images must have {layout.num_vars} pixels each")
    if embeddings.ndim != 3 or embeddings.shape[:2] != (len(images), layout.num_patches):
        raise ValueError(
            f"embedding grid {embeddings.shape[:2]} does not match "
            f"{len(images)} images x {layout.num_patches} positions"
        )
    return [EmbeddedDataset(images[:, idx], embeddings[:, i]) for i, idx in enumerate(layout.patches)]


def reassemble_patches(patch_pixels, layout: PatchLayout) -> np.ndarray:
    n = len(patch_pixels[0])
    images = np.empty((n, layout.num_vars), dtype=np.asarray(patch_pixels[0]).dtype)
    for idx, px in zip(layout.patches, patch_pixels):
        images[:, idx] = px
    return images


def tie_and_train_conditional(
    patch_datasets: list[EmbeddedDataset],
    config: GrowConfig,
    rng=None,
    domains=None,
    n_outer: int | None = None,
    initial: Circuit | None = None,
):
    """Learn one ``K``-headed conditional shared by every patch position.

    All positions' records are pooled and grown together; the returned
    cluster maps slice the pooled labels back per position and share one
    set of centroids. With ``n_outer`` the pooled data is first split into
    outer clusters, each grown to ``config.K`` heads.
    """
    if not patch_datasets:
        raise ValueError("no patch datasets")
    shape = (patch_datasets[0].x.shape[1], patch_datasets[0].h.shape[1])
    if any((d.x.shape[1], d.h.shape[1]) != shape for d in patch_datasets):
        raise ValueError("patch datasets differ in patch size or embedding dimension")
    rng = np.random.default_rng(rng)
    pooled = EmbeddedDataset(
        np.concatenate([d.x for d in patch_datasets]), np.concatenate([d.h for d in patch_datasets])
    )
    if domains is None:
        domains = (int(pooled.x.max()) + 1,) * shape[0]
    if initial is None:
        initial = learn_hclt(pooled.x, config.hidden_size, 1, domains, rng=rng)
    if n_outer is not None and n_outer > 1:
        cmap, circuit = grow_two_level(pooled, initial, config, n_outer, config.K, rng=rng)
    else:
        cmap, circuit = progressive_grow(pooled, initial, config, rng=rng)
    maps, start = [], 0
    for d in patch_datasets:
        maps.append(ClusterMap(cmap.centroids, cmap.labels[start : start + len(d)]))
        start += len(d)
    return circuit, maps


def train_prior(z, num_clusters: int, layout: PatchLayout | None = None, hidden_size: int = 16,
                epochs: int = 30, rng=None, leaf_pseudocount: float = 0.1) -> Circuit:
    """HCLT over the latent grid, fit by full-batch EM on label grids ``z``."""
    z = np.asarray(z, dtype=np.int64)
    if layout is not None and z.shape[1] != layout.num_patches:
        raise ValueError("label grids do not match the layout")
    if z.size and (z.min() < 0 or z.max() >= num_clusters):
        raise ValueError(f"labels must lie in [0, {num_clusters})")
    rng = np.random.default_rng(rng)
    domains = (num_clusters,) * z.shape[1]
    if z.shape[1] > 1 and len(z) > 1:
        tree = chow_liu_tree(pairwise_mutual_information(z, 1.0, domains))
    else:
        tree = chow_liu_tree(np.zeros((z.shape[1], z.shape[1])))
    prior = build_hclt(tree, hidden_size, 1, domains, data=z, rng=rng)
    prior, _ = train_em(prior, LabeledBatch.unlabeled(z), epochs, None, 1.0, 1.0, rng=rng,
                        leaf_pseudocount=leaf_pseudocount)
    return prior


@dataclass
class AssembledModel:
    """Prior over the latent grid, shared conditional and the composed circuit.

    ``circuit`` is the model over pixels. ``prior`` and ``conditional`` are
    the components it was assembled from; finetuning updates ``circuit``
    only.
    """

    prior: Circuit
    conditional: Circuit
    layout: PatchLayout
    circuit: Circuit
    ties: Ties
    finetuned: bool = False
    finetune_trace: list = field(default_factory=list)


def assemble(prior: Circuit, conditional: Circuit, layout: PatchLayout) -> AssembledModel:
    """Compose ``p(x) = sum_z p(z) prod_i p(x_i | z_i)`` into one circuit.

    Every prior leaf on ``Z_i`` becomes a sum unit over the children of the
    conditional heads instantiated on patch ``i``: a leaf with table ``q``
    mixes head ``c``'s children with weight ``q[c] * theta[c, m]``. The
    conditional's internal units are copied per position and tied.
    """
    K = conditional.num_heads
    if prior.num_vars != layout.num_patches:
        raise ValueError(f"prior has {prior.num_vars} latents, layout has {layout.num_patches} patches")
    if any(d != K for d in prior.domains):
        raise ValueError(f"prior latents have {set(prior.domains)} values, conditional has {K} heads")
    if conditional.num_vars != layout.patch_size:
        raise ValueError("conditional scope does not match the patch size")
    if not reachable_units(conditional).all():
        conditional = subcircuit(conditional)

    domains = [0] * layout.num_vars
    patches = layout.patches
    for idx in patches:
        for v_local, v in enumerate(idx):
            domains[v] = conditional.domains[v_local]
    b = CircuitBuilder(domains)
    edge_group: list[np.ndarray] = []
    leaf_group: list[np.ndarray] = []
    next_group = [int(conditional.num_sum_edges), int(len(conditional.leaf_probs))]

    def fresh(kind, n):
        g = np.arange(next_group[kind], next_group[kind] + n)
        next_group[kind] += n
        return g

    roots = set(conditional.roots)
    referenced = set()
    for u in range(conditional.num_units):
        referenced.update(conditional.children(u))
    instances = []
    for idx in patches:
        new = np.full(conditional.num_units, -1, dtype=np.int64)
        for u in range(conditional.num_units):
            if u in roots and u not in referenced and conditional.kinds[u] == 1:
                continue
            k = conditional.kinds[u]
            if k == 0:
                new[u] = b.input(idx[conditional.var(u)], conditional.probs(u))
                leaf_group.append(np.arange(conditional.leaf_start[u], conditional.leaf_start[u + 1]))
            elif k == 2:
                new[u] = b.product(new[c] for c in conditional.children(u))
            else:
                new[u] = b.sum((new[c] for c in conditional.children(u)), conditional.weights(u))
                edge_group.append(np.arange(conditional.edge_start[u], conditional.edge_start[u + 1]))
        instances.append(new)

    head_children = [conditional.children(r) for r in conditional.roots]
    head_weights = [conditional.weights(r) if conditional.kinds[r] == 1 else np.ones(1) for r in conditional.roots]
    head_direct = [conditional.kinds[r] != 1 for r in conditional.roots]
    pnew = np.full(prior.num_units, -1, dtype=np.int64)
    for u in range(prior.num_units):
        k = prior.kinds[u]
        if k == 0:
            pos = prior.var(u)
            q = prior.probs(u)
            mix: dict[int, float] = {}
            for c in range(K):
                if head_direct[c]:
                    r = conditional.roots[c]
                    mix[r] = mix.get(r, 0.0) + q[c]
                    continue
                for m, w in zip(head_children[c], head_weights[c]):
                    mix[m] = mix.get(m, 0.0) + q[c] * w
            w = np.array(list(mix.values()))
            pnew[u] = b.sum((instances[pos][m] for m in mix), w / w.sum())
            edge_group.append(fresh(0, len(w)))
        elif k == 2:
            pnew[u] = b.product(pnew[c] for c in prior.children(u))
        else:
            # a prior leaf became a sum; a one-child product keeps sums and products alternating
            ch = [b.product([pnew[c]]) if prior.kinds[c] == 0 else pnew[c] for c in prior.children(u)]
            pnew[u] = b.sum(ch, prior.weights(u))
            edge_group.append(fresh(0, len(ch)))
    circuit = b.build([int(pnew[r]) for r in prior.roots])
    ties = Ties(
        np.concatenate(edge_group) if edge_group else np.zeros(0, dtype=np.int64),
        np.concatenate(leaf_group) if leaf_group else np.zeros(0, dtype=np.int64),
    )
    return AssembledModel(prior, conditional, layout, circuit, ties)


def finetune(model: AssembledModel, images, epochs: int, rng=None) -> AssembledModel:
    """Full-batch EM on unlabeled images with the conditional copies kept tied."""
    if epochs <= 0:
        return model
    circuit, trace = train_em(
        model.circuit, LabeledBatch.unlabeled(images), epochs, None, 1.0, 1.0, rng=rng, ties=model.ties
    )
    return replace(model, circuit=circuit, finetuned=True, finetune_trace=model.finetune_trace + trace)


def _conditional_head_ll(model: AssembledModel, images):
    images = np.asarray(images, dtype=np.int64)
    return [model.conditional.head_log_likelihoods(images[:, idx]) for idx in model.layout.patches]


def _prior_with_leaf_values(prior: Circuit, leaf_values):
    dummy = np.zeros((leaf_values.shape[1], prior.num_vars), dtype=np.int64)
    return prior.head_log_likelihoods(dummy, leaf_values=leaf_values)[:, 0]


@dataclass(frozen=True)
class GapReport:
    lvd_objective: float
    true_ll: float
    variational_gap: float


def gap_report(model: AssembledModel, images, z) -> GapReport:
    """LVD objective ``sum log p(x, z)``, exact ``sum log p(x)`` and their gap.

    Both are computed by the same pass over the prior, with each latent
    leaf replaced either by the joint term of the assigned cluster or by the
    marginal over clusters, so ``K = 1`` gives a gap of exactly zero.
    """
    z = np.asarray(z, dtype=np.int64)
    cond = _conditional_head_ll(model, images)
    prior = model.prior
    leaf_ids = np.flatnonzero(prior.kinds == 0)
    n = len(z)
    rows = np.arange(n)
    joint = np.empty((len(leaf_ids), n))
    marg = np.empty((len(leaf_ids), n))
    with np.errstate(divide="ignore"):
        for r, u in enumerate(leaf_ids):
            pos = prior.var(u)
            logq = np.log(prior.probs(u))
            terms = logq[None, :] + cond[pos]
            joint[r] = terms[rows, z[:, pos]]
            marg[r] = logsumexp(terms, axis=1)
    lvd = float(_prior_with_leaf_values(prior, joint).sum())
    true = float(_prior_with_leaf_values(prior, marg).sum())
    return GapReport(lvd, true, true - lvd)


def bits_per_dimension(model, images) -> float:
    """``-mean log p(x) / (V ln 2)`` for an assembled model or a circuit."""
    circuit = model.circuit if isinstance(model, AssembledModel) else model
    images = np.asarray(images)
    ll = circuit.head_log_likelihoods(images)[:, 0]
    return float(-ll.mean() / (circuit.num_vars * math.log(2.0)))


def elbo(log_px_given_z, log_pz, q) -> np.ndarray:
    """Per-sample ``E_q[log p(x|z)] - KL(q || p(z))`` for a single discrete latent."""
    q = np.asarray(q, dtype=np.float64)
    log_pz = np.broadcast_to(np.asarray(log_pz, dtype=np.float64), q.shape)
    expected = np.where(q > 0, q * np.asarray(log_px_given_z), 0.0).sum(axis=1)
    kl = (xlogy(q, q) - np.where(q > 0, q * log_pz, 0.0)).sum(axis=1)
    return expected - kl


def randomize_parameters(circuit: Circuit, rng) -> Circuit:
    """Same structure with every sum and leaf table redrawn from a flat Dirichlet."""
    w = rng.gamma(1.0, size=circuit.num_sum_edges)
    p = rng.gamma(1.0, size=len(circuit.leaf_probs))
    w = np.maximum(w, 1e-300)
    p = np.maximum(p, 1e-300)
    sums = np.flatnonzero(circuit.kinds == 1)
    leaves = np.flatnonzero(circuit.kinds == 0)
    w /= np.repeat(np.add.reduceat(w, circuit.edge_start[sums]), np.diff(circuit.edge_start)[sums])
    p /= np.repeat(np.add.reduceat(p, circuit.leaf_start[leaves]), np.diff(circuit.leaf_start)[leaves])
    return circuit.with_parameters(w, p)


def objective_difference(prior: Circuit, conditional: Circuit, layout: PatchLayout, images, q):
    """Per-sample ``E_q[log p(x,z)] - (E_q[log p(x|z)] - KL(q || p(z)))``.

    ``q`` has shape ``(N, positions, K)`` and factorizes over positions; the
    expectations are taken by enumerating every latent grid.
    """
    q = np.asarray(q, dtype=np.float64)
    n, P, K = q.shape
    if K ** P > 1 << 16:
        raise ValueError("too many latent grids to enumerate")
    grids = np.array(list(itertools.product(range(K), repeat=P)), dtype=np.int64)
    log_pz = prior.head_log_likelihoods(grids)[:, 0]
    images = np.asarray(images, dtype=np.int64)
    log_px_z = np.zeros((n, len(grids)))
    qz = np.ones((n, len(grids)))
    for i, idx in enumerate(layout.patches):
        cond = conditional.head_log_likelihoods(images[:, idx])
        log_px_z += cond[:, grids[:, i]]
        qz *= q[:, i, grids[:, i]]
    live = qz > 0
    log_q = np.log(np.where(live, qz, 1.0))
    joint = np.where(live, qz * (log_pz[None, :] + log_px_z), 0.0).sum(axis=1)
    expected = np.where(live, qz * log_px_z, 0.0).sum(axis=1)
    kl = np.where(live, qz * (log_q - log_pz[None, :]), 0.0).sum(axis=1)
    return joint - (expected - kl)


def entropy_identity_check(model: AssembledModel, images, q, n_reparam: int = 50, rng=None) -> float:
    """Largest deviation of :func:`objective_difference` from ``E_q[log q]``.

    The difference is recomputed under ``n_reparam`` random parameter draws
    of both components; it must equal the posterior's negative entropy, which
    does not involve the circuit at all.
    """
    rng = np.random.default_rng(rng)
    q = np.asarray(q, dtype=np.float64)
    neg_entropy = xlogy(q, q).sum(axis=(1, 2))
    prior, cond = model.prior, model.conditional
    worst = float(np.abs(objective_difference(prior, cond, model.layout, images, q) - neg_entropy).max())
    for _ in range(n_reparam):
        prior_r = randomize_parameters(prior, rng)
        cond_r = randomize_parameters(cond, rng)
        diff = objective_difference(prior_r, cond_r, model.layout, images, q)
        worst = max(worst, float(np.abs(diff - neg_entropy).max()))
    return worst


# Dataset text format:
#   DS v1 <N> <V> <D> <grid_h> <grid_w>
#   per sample: one line of V integers, then grid_h * grid_w lines of D reals.

def format_dataset(images, embeddings, grid) -> str:
    images = np.asarray(images, dtype=np.int64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n, V = images.shape
    gh, gw = grid
    D = embeddings.shape[2]
    if embeddings.shape[:2] != (n, gh * gw):
        raise ValueError("embeddings do not match the grid")
    lines = [f"DS v1 {n} {V} {D} {gh} {gw}"]
    for i in range(n):
        lines.append(" ".join(str(int(v)) for v in images[i]))
        lines.extend(" ".join(format(float(v), ".17g") for v in row) for row in embeddings[i])
    return "\n".join(lines) + "\n"


def write_dataset(path, images, embeddings, grid) -> None:
    atomic_write(path, format_dataset(images, embeddings, grid))


def parse_dataset(text: str):
    """Returns ``(images, embeddings, (grid_h, grid_w))``."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty dataset", line=1, offset=0)
    parts = lines[0].split()
    try:
        if parts[:2] != ["DS", "v1"] or len(parts) != 7:
            raise ValueError
        n, V, D, gh, gw = (int(t) for t in parts[2:])
    except ValueError:
        raise ParseError(f"bad dataset header {lines[0]!r}", line=1, offset=0) from None
    P = gh * gw
    if len(lines) != 1 + n * (1 + P):
        raise ParseError(f"expected {1 + n * (1 + P)} non-empty lines, found {len(lines)}", line=len(lines))
    images = np.empty((n, V), dtype=np.int64)
    embeddings = np.empty((n, P, D))
    pos = 1
    try:
        for i in range(n):
            row = lines[pos].split()
            if len(row) != V:
                raise ValueError(f"sample {i} has {len(row)} pixels, expected {V}")
            images[i] = [int(t) for t in row]
            for j in range(P):
                vals = lines[pos + 1 + j].split()
                if len(vals) != D:
                    raise ValueError(f"sample {i} embedding {j} has {len(vals)} values, expected {D}")
                embeddings[i, j] = [float(t) for t in vals]
            pos += 1 + P
    except ValueError as exc:
        raise ParseError(str(exc), line=pos + 1) from None
    return images, embeddings, (gh, gw)


def read_dataset(path):
    with open(path) as fh:
        return parse_dataset(fh.read())
