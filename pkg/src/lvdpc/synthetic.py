"""Synthetic image/embedding data with a known patch-level mixture."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lvd import PatchLayout


def sample_categorical(cdf, rng):
    """Draw one value per row of the cumulative tables ``cdf`` (last axis)."""
    u = rng.random(cdf.shape[:-1])
    return np.minimum((u[..., None] > cdf).sum(axis=-1), cdf.shape[-1] - 1)


@dataclass
class PatchMixture:
    """Ground truth: every patch is drawn from one of ``n_components``
    fully factorized components; a patch's embedding is its component's
    center plus isotropic Gaussian noise. Component ids follow a raster
    Markov chain over the grid (keep the previous id with ``stay``).
    """

    layout: PatchLayout
    tables: np.ndarray  # (components, patch_size, domain)
    centers: np.ndarray  # (components, embed_dim)
    noise: float
    stay: float

    @classmethod
    def random(cls, rng, image_hw=(8, 8), patch=(2, 2), n_components=16, domain=8,
               embed_dim=8, noise=1.0, concentration=0.3, stay=0.5, center_scale=2.0):
        rng = np.random.default_rng(rng)
        layout = PatchLayout((image_hw[0], image_hw[1], 1), patch)
        tables = rng.dirichlet(np.full(domain, concentration), size=(n_components, layout.patch_size))
        tables = np.maximum(tables, 1e-6)
        tables /= tables.sum(axis=-1, keepdims=True)
        centers = rng.normal(0.0, center_scale, size=(n_components, embed_dim))
        return cls(layout, tables, centers, noise, stay)

    @property
    def n_components(self) -> int:
        return len(self.tables)

    def sample(self, n, rng):
        """Returns ``(images, embeddings, components)``."""
        rng = np.random.default_rng(rng)
        P = self.layout.num_patches
        C = self.n_components
        z = np.empty((n, P), dtype=np.int64)
        z[:, 0] = rng.integers(0, C, n)
        for i in range(1, P):
            keep = rng.random(n) < self.stay
            z[:, i] = np.where(keep, z[:, i - 1], rng.integers(0, C, n))
        cdf = np.cumsum(self.tables, axis=-1)
        images = np.empty((n, self.layout.num_vars), dtype=np.int64)
        for i, idx in enumerate(self.layout.patches):
            images[:, idx] = sample_categorical(cdf[z[:, i]], rng)
        emb = self.centers[z] + self.noise * rng.normal(size=(n, P, self.centers.shape[1]))
        return images, emb, z

    def patch_log_likelihood(self, patches, components):
        """``log p(x_i | component)`` under the ground truth."""
        logt = np.log(self.tables)
        cols = np.arange(patches.shape[1])
        return logt[components[:, None], cols[None, :], patches].sum(axis=1)

    def patch_marginal_log_likelihood(self, patches):
        logt = np.log(self.tables)
        cols = np.arange(patches.shape[1])
        per = np.stack([logt[c, cols[None, :], patches].sum(axis=1) for c in range(self.n_components)], axis=1)
        m = per.max(axis=1, keepdims=True)
        return (np.log(np.exp(per - m).sum(axis=1)) + m[:, 0]) - np.log(self.n_components)
