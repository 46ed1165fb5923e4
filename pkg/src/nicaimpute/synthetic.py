"""Fully observed synthetic tables with known structure, used for benchmarks and tests."""

from __future__ import annotations

import numpy as np

from .data import ColumnKind, Dataset


def gaussian_clusters(n: int = 500, d: int = 8, clusters: int = 3, separation: float = 3.0,
                      seed: int = 0) -> Dataset:
    """Mixture of ``clusters`` Gaussians whose features are correlated within each cluster.

    Each cluster has its own random mixing matrix, so the features co-vary
    differently per cluster. The cluster label is kept as a multiclass target.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=separation, size=(clusters, d))
    mixers = rng.normal(scale=1.0 / np.sqrt(d), size=(clusters, d, d)) + 0.5 * np.eye(d)
    labels = rng.integers(clusters, size=n)
    z = rng.normal(size=(n, d))
    x = centers[labels] + np.einsum("ni,nij->nj", z, mixers[labels])
    values = np.column_stack([x, labels.astype(np.float64)])
    kinds = [ColumnKind("continuous")] * d + [ColumnKind("categorical", clusters)]
    names = [f"x{j}" for j in range(d)] + ["cluster"]
    codebooks = {d: [str(c) for c in range(clusters)]}
    return Dataset(values, kinds, names, target=d, target_kind="multiclass" if clusters > 2 else "binary",
                   codebooks=codebooks, name=f"clusters_n{n}_d{d}")


def linear_binary(n: int = 1000, d: int = 10, latent: int = 3, noise: float = 0.5,
                  seed: int = 0) -> Dataset:
    """Binary labels from a linear score on low-rank correlated features."""
    rng = np.random.default_rng(seed)
    loadings = rng.normal(size=(latent, d))
    factors = rng.normal(size=(n, latent))
    x = factors @ loadings + noise * rng.normal(size=(n, d))
    w = rng.normal(size=d)
    score = x @ w
    score = (score - score.mean()) / score.std()
    y = (score + 0.5 * rng.normal(size=n) > 0).astype(np.float64)
    values = np.column_stack([x, y])
    kinds = [ColumnKind("continuous")] * d + [ColumnKind("categorical", 2)]
    names = [f"x{j}" for j in range(d)] + ["label"]
    return Dataset(values, kinds, names, target=d, target_kind="binary",
                   codebooks={d: ["0", "1"]}, name=f"linear_binary_n{n}_d{d}")


GENERATORS = {
    "clusters": gaussian_clusters,
    "linear-binary": linear_binary,
}


def make(kind: str, **params) -> Dataset:
    try:
        gen = GENERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown synthetic dataset {kind!r}; choose from {sorted(GENERATORS)}") from None
    return gen(**params)
