"""Attack-task profiling: attribute similarity, the two-level hierarchy, task weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from taipan.dcor import distance_correlation


def encode_sensitive(s: np.ndarray, cardinalities=None) -> list[np.ndarray]:
    """Per-attribute numeric blocks: raw index column if binary, one-hot otherwise."""
    s = np.asarray(s)
    if s.ndim == 1:
        s = s[:, None]
    if cardinalities is None:
        cardinalities = [max(int(s[:, i].max()) + 1, 2) for i in range(s.shape[1])]
    blocks = []
    for i, k in enumerate(cardinalities):
        if k <= 2:
            blocks.append(s[:, i : i + 1].astype(np.float64))
        else:
            blocks.append(np.eye(k)[s[:, i]])
    return blocks


def _centered_indicators(col: np.ndarray, k: int) -> np.ndarray:
    if k <= 2:
        ind = col.astype(np.float64)[:, None]
    else:
        ind = np.eye(k)[col]
    return ind - ind.mean(axis=0)


def cosine_similarity_matrix(s: np.ndarray, cardinalities=None) -> np.ndarray:
    """Cosine similarity of mean-centred attribute columns.

    For binary attributes this is the Pearson correlation. Multi-class
    attributes are compared as the mean pairwise cosine of their centred
    one-hot columns. Constant attributes get 0 similarity to everything else.
    """
    s = np.asarray(s)
    if s.ndim == 1:
        s = s[:, None]
    n_attr = s.shape[1]
    if cardinalities is None:
        cardinalities = [max(int(s[:, i].max()) + 1, 2) for i in range(n_attr)]
    blocks = []
    for i in range(n_attr):
        b = _centered_indicators(s[:, i], cardinalities[i])
        norms = np.linalg.norm(b, axis=0)
        blocks.append((b, norms))
    sim = np.eye(n_attr)
    for i in range(n_attr):
        for j in range(i + 1, n_attr):
            bi, ni = blocks[i]
            bj, nj = blocks[j]
            denom = np.outer(ni, nj)
            with np.errstate(invalid="ignore", divide="ignore"):
                cos = np.where(denom > 0, (bi.T @ bj) / np.where(denom > 0, denom, 1.0), 0.0)
            sim[i, j] = sim[j, i] = float(cos.mean())
    return sim


@dataclass
class AttackHierarchy:
    """Two-level grouping of attack tasks.

    ``clusters`` are sorted task-index lists ordered by their smallest member.
    ``linkage_trace`` rows are (cluster_a, cluster_b, height, size) in the
    scipy convention: ids < s are tasks, id s+k is the k-th merge.
    """

    clusters: list[list[int]]
    similarity: np.ndarray
    linkage_trace: list[tuple[int, int, float, int]] = field(default_factory=list)
    is_flat: bool = False

    @property
    def num_tasks(self) -> int:
        return sum(len(c) for c in self.clusters)

    def cluster_of(self, task: int) -> int:
        for j, members in enumerate(self.clusters):
            if task in members:
                return j
        raise KeyError(f"task {task} has no cluster path")

    def to_dict(self) -> dict:
        return {
            "clusters": [list(map(int, c)) for c in self.clusters],
            "similarity": np.asarray(self.similarity).tolist(),
            "linkage_trace": [[int(a), int(b), float(h), int(k)] for a, b, h, k in self.linkage_trace],
            "is_flat": bool(self.is_flat),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackHierarchy":
        return cls(
            clusters=[list(map(int, c)) for c in d["clusters"]],
            similarity=np.asarray(d["similarity"], dtype=np.float64),
            linkage_trace=[(int(a), int(b), float(h), int(k)) for a, b, h, k in d.get("linkage_trace", [])],
            is_flat=bool(d.get("is_flat", False)),
        )

    @classmethod
    def flat(cls, num_tasks: int, similarity: np.ndarray | None = None) -> "AttackHierarchy":
        sim = np.eye(num_tasks) if similarity is None else similarity
        return cls([[i] for i in range(num_tasks)], sim, [], True)

    def validate(self) -> None:
        seen = sorted(t for c in self.clusters for t in c)
        if any(len(c) == 0 for c in self.clusters) or seen != list(range(len(seen))):
            raise ValueError("hierarchy clusters must partition the task set")


def average_linkage(distance: np.ndarray) -> list[tuple[int, int, float, int]]:
    """Agglomerative average-linkage merge history.

    Ties are broken towards the pair whose smallest member task index is
    lowest, then the second cluster's smallest member.
    """
    n = distance.shape[0]
    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    trace = []
    next_id = n
    while len(members) > 1:
        ids = sorted(members, key=lambda k: min(members[k]))
        best = None
        for a_pos, a in enumerate(ids):
            for b in ids[a_pos + 1 :]:
                d = float(distance[np.ix_(members[a], members[b])].mean())
                key = (d, min(members[a]), min(members[b]))
                if best is None or key < best[0]:
                    best = (key, a, b)
        (d, _, _), a, b = best
        merged = sorted(members.pop(a) + members.pop(b))
        members[next_id] = merged
        trace.append((min(a, b), max(a, b), d, len(merged)))
        next_id += 1
    return trace


def _cut(trace, n: int, height: float) -> list[list[int]]:
    members = {i: [i] for i in range(n)}
    for k, (a, b, h, _) in enumerate(trace):
        if h > height:
            break
        members[n + k] = sorted(members.pop(a) + members.pop(b))
    return sorted(members.values(), key=min)


def build_attack_hierarchy(sim: np.ndarray, link_threshold: float = 0.5, flat_threshold: float = 0.05) -> AttackHierarchy:
    """Cluster tasks by average linkage on ``1 - sim`` and cut at ``1 - link_threshold``.

    Falls back to all-singleton clusters when no off-diagonal |similarity|
    reaches ``flat_threshold``.
    """
    sim = np.asarray(sim, dtype=np.float64)
    s = sim.shape[0]
    if sim.shape != (s, s):
        raise ValueError("similarity matrix must be square")
    trace = average_linkage(1.0 - sim) if s > 1 else []
    off = np.abs(sim[~np.eye(s, dtype=bool)])
    if s == 1 or off.max() < flat_threshold:
        return AttackHierarchy([[i] for i in range(s)], sim, trace, True)
    clusters = _cut(trace, s, 1.0 - link_threshold)
    return AttackHierarchy(clusters, sim, trace, all(len(c) == 1 for c in clusters))


def task_weights(
    sensitive: np.ndarray,
    x_star: np.ndarray,
    cardinalities=None,
    max_nodes: int = 2000,
    seed: int = 0,
) -> np.ndarray:
    """dCor between each attribute and the features plus the other attributes.

    Above ``max_nodes`` rows the same fixed-seed subsample is used for every task.
    """
    sensitive = np.asarray(sensitive)
    if sensitive.ndim == 1:
        sensitive = sensitive[:, None]
    x_star = np.asarray(x_star, dtype=np.float64)
    n = sensitive.shape[0]
    if n > max_nodes:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=max_nodes, replace=False))
        sensitive, x_star = sensitive[idx], x_star[idx]
    blocks = encode_sensitive(sensitive, cardinalities)
    weights = []
    for i, target in enumerate(blocks):
        rest = [x_star] + [b for j, b in enumerate(blocks) if j != i]
        weights.append(distance_correlation(target, np.hstack(rest)))
    return np.asarray(weights)
