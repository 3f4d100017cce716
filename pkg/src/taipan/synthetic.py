"""Stochastic-block-model graphs with correlated binary sensitive attributes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from taipan.graph import AttributedGraph


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic attributed graph.

    ``homophily_strength`` in [0, 1] is the share of each node's latent
    attribute variance explained by its block; 0 makes attributes independent
    of the topology. ``inter_attribute_correlation`` is the correlation matrix
    of the Gaussian latents that are thresholded at zero into binary attributes.
    ``feature_shift`` translates all features (for shifted-target experiments).
    The topology-tied latent part averages i.i.d. node draws over closed
    neighbourhoods ``smoothing_rounds`` times.
    """

    node_count: int = 1000
    cluster_count: int = 8
    edge_density_within: float = 0.05
    edge_density_between: float = 0.002
    homophily_strength: float = 0.7
    attribute_count: int = 3
    inter_attribute_correlation: list[list[float]] | None = None
    feature_dim: int = 16
    noise_scale: float = 1.0
    signal_scale: float = 1.0
    label_strength: float = 1.0
    feature_shift: float = 0.0
    smoothing_rounds: int = 2
    seed: int = 0
    name: str = "synthetic"

    def correlation_matrix(self) -> np.ndarray:
        s = self.attribute_count
        if self.inter_attribute_correlation is None:
            return np.eye(s)
        r = np.asarray(self.inter_attribute_correlation, dtype=np.float64)
        if r.shape != (s, s):
            raise ValueError(f"correlation matrix must be {s}x{s}, got {r.shape}")
        return r

    def validate(self) -> np.ndarray:
        if self.node_count < 1:
            raise ValueError("node_count must be positive")
        if self.cluster_count < 1 or self.attribute_count < 1 or self.feature_dim < 1 or self.smoothing_rounds < 0:
            raise ValueError("cluster_count, attribute_count and feature_dim must be positive")
        for p in (self.edge_density_within, self.edge_density_between, self.homophily_strength):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        r = self.correlation_matrix()
        if not np.allclose(r, r.T) or not np.allclose(np.diag(r), 1.0) or np.abs(r).max() > 1 + 1e-12:
            raise ValueError("correlation matrix must be symmetric with unit diagonal and entries in [-1, 1]")
        if np.linalg.eigvalsh(r).min() < -1e-10:
            raise ValueError("correlation matrix is not positive semidefinite")
        return r


def _psd_factor(r: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(r)
    return v * np.sqrt(np.clip(w, 0.0, None))


def _smoothed_field(rng: np.random.Generator, n: int, s: int, edges: np.ndarray, rounds: int) -> np.ndarray:
    """Independent Gaussian columns averaged over closed neighbourhoods ``rounds`` times."""
    z = rng.standard_normal((n, s))
    if len(edges) == 0:
        return z
    adj = sp.csr_matrix((np.ones(2 * len(edges)), (np.r_[edges[:, 0], edges[:, 1]], np.r_[edges[:, 1], edges[:, 0]])), shape=(n, n))
    adj = adj + sp.eye(n, format="csr")
    inv = 1.0 / np.asarray(adj.sum(axis=1)).ravel()
    for _ in range(rounds):
        z = inv[:, None] * (adj @ z)
    return z


def _whiten(z: np.ndarray) -> np.ndarray:
    """Centre ``z`` and give it identity sample covariance (when full rank)."""
    z = z - z.mean(axis=0)
    if z.shape[0] <= z.shape[1]:
        return z
    try:
        chol = np.linalg.cholesky(z.T @ z / z.shape[0])
    except np.linalg.LinAlgError:
        return z
    return np.linalg.solve(chol, z.T).T


def _sbm_edges(rng: np.random.Generator, blocks: np.ndarray, p_in: float, p_out: float) -> np.ndarray:
    n = len(blocks)
    out = []
    # row-by-row upper triangle keeps memory O(n) per step
    for u in range(n - 1):
        v = np.arange(u + 1, n)
        p = np.where(blocks[v] == blocks[u], p_in, p_out)
        hit = v[rng.random(len(v)) < p]
        if len(hit):
            out.append(np.column_stack([np.full(len(hit), u), hit]))
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.int64)


def generate_synthetic(spec: SyntheticSpec) -> AttributedGraph:
    """Sample a graph, sensitive attributes, features and task labels from ``spec``."""
    r = spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, c, s, d = spec.node_count, spec.cluster_count, spec.attribute_count, spec.feature_dim
    factor = _psd_factor(r)

    blocks = rng.integers(0, c, size=n)
    edges = _sbm_edges(rng, blocks, spec.edge_density_within, spec.edge_density_between)

    # the topology-tied part is a neighbourhood-smoothed field rather than a per-block constant,
    # so chance correlation between attributes shrinks with n instead of with the block count
    field_ = _whiten(_smoothed_field(rng, n, s, edges, spec.smoothing_rounds))
    eps = rng.standard_normal((n, s))
    h = spec.homophily_strength
    latent = _whiten(np.sqrt(h) * field_ + np.sqrt(1.0 - h) * eps) @ factor.T
    sensitive = (latent > 0).astype(np.int64)

    # class-conditional feature means: one direction per (attribute, class)
    means = rng.standard_normal((s, 2, d)) * spec.signal_scale / np.sqrt(s)
    x = means[np.arange(s)[None, :], sensitive].sum(axis=1)
    x += spec.noise_scale * rng.standard_normal((n, d)) + spec.feature_shift

    score = spec.label_strength * latent.mean(axis=1) + rng.standard_normal(n)
    labels = (score > 0).astype(np.int64)
    return AttributedGraph(
        features=x,
        edges=edges,
        sensitive=sensitive,
        labels=labels,
        sensitive_cardinalities=(2,) * s,
        sensitive_names=tuple(f"s{i}" for i in range(s)),
        feature_names=tuple(f"x{i}" for i in range(d)),
        label_classes=2,
        name=spec.name,
    )
