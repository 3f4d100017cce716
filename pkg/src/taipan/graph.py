"""Attributed graph container, loading, splitting and feature-space helpers."""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class SchemaError(ValueError):
    """The node table or edge file does not match the declared schema."""


class GraphValidationError(ValueError):
    pass


def _normalize_edges(edges: np.ndarray, n: int) -> np.ndarray:
    """Canonical (u < v) unique undirected pairs; self-loops dropped."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise GraphValidationError(f"edge endpoint outside [0, {n})")
    edges = edges[edges[:, 0] != edges[:, 1]]
    edges = np.sort(edges, axis=1)
    if len(edges) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(edges, axis=0)


@dataclass(frozen=True, eq=False)
class AttributedGraph:
    """Undirected attributed graph with optional sensitive attributes and labels.

    ``features`` holds only the non-sensitive columns. ``sensitive`` is an
    integer matrix of class indices (one column per attribute) and may be
    ``None`` for a target graph whose attributes are masked.
    """

    features: np.ndarray
    edges: np.ndarray
    sensitive: np.ndarray | None = None
    labels: np.ndarray | None = None
    sensitive_cardinalities: tuple[int, ...] = ()
    sensitive_names: tuple[str, ...] = ()
    feature_names: tuple[str, ...] = ()
    label_classes: int | None = None
    train_mask: np.ndarray | None = None
    val_mask: np.ndarray | None = None
    test_mask: np.ndarray | None = None
    name: str = "graph"
    _adjacency: sp.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise GraphValidationError("features must be a 2-D matrix")
        if not np.all(np.isfinite(x)):
            raise GraphValidationError("features contain non-finite values")
        n = x.shape[0]
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "edges", _normalize_edges(self.edges, n))

        if self.sensitive is not None:
            s = np.asarray(self.sensitive)
            if s.ndim == 1:
                s = s[:, None]
            s = s.astype(np.int64)
            if s.shape[0] != n:
                raise GraphValidationError("sensitive matrix row count != node count")
            cards = tuple(int(c) for c in self.sensitive_cardinalities) or tuple(
                max(int(s[:, i].max()) + 1 if n else 2, 2) for i in range(s.shape[1])
            )
            if len(cards) != s.shape[1]:
                raise GraphValidationError("one cardinality per sensitive attribute required")
            for i, c in enumerate(cards):
                if c < 2:
                    raise GraphValidationError(f"attribute {i} has cardinality {c} < 2")
                if n and (s[:, i].min() < 0 or s[:, i].max() >= c):
                    raise GraphValidationError(f"attribute {i} values outside [0, {c})")
            object.__setattr__(self, "sensitive", s)
            object.__setattr__(self, "sensitive_cardinalities", cards)
            if not self.sensitive_names:
                object.__setattr__(self, "sensitive_names", tuple(f"s{i}" for i in range(s.shape[1])))
        if self.labels is not None:
            y = np.asarray(self.labels).astype(np.int64).ravel()
            if y.shape[0] != n:
                raise GraphValidationError("label vector length != node count")
            object.__setattr__(self, "labels", y)
            if self.label_classes is None:
                object.__setattr__(self, "label_classes", max(int(y.max()) + 1, 2) if n else 2)
        masks = [self.train_mask, self.val_mask, self.test_mask]
        if any(m is not None for m in masks):
            if any(m is None for m in masks):
                raise GraphValidationError("either all split masks or none must be given")
            tr, va, te = (np.asarray(m, dtype=bool) for m in masks)
            if not (tr.shape == va.shape == te.shape == (n,)):
                raise GraphValidationError("mask shape mismatch")
            if np.any(tr & va) or np.any(tr & te) or np.any(va & te):
                raise GraphValidationError("split masks overlap")
            if not np.all(tr | va | te):
                raise GraphValidationError("split masks do not cover every node")
            object.__setattr__(self, "train_mask", tr)
            object.__setattr__(self, "val_mask", va)
            object.__setattr__(self, "test_mask", te)

    @property
    def node_count(self) -> int:
        return self.features.shape[0]

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def num_sensitive(self) -> int:
        return 0 if self.sensitive is None else self.sensitive.shape[1]

    @property
    def adjacency(self) -> sp.csr_matrix:
        if self._adjacency is None:
            n = self.node_count
            u, v = self.edges[:, 0], self.edges[:, 1]
            data = np.ones(2 * len(u))
            adj = sp.csr_matrix(
                (data, (np.concatenate([u, v]), np.concatenate([v, u]))), shape=(n, n)
            )
            object.__setattr__(self, "_adjacency", adj)
        return self._adjacency

    @property
    def has_masks(self) -> bool:
        return self.train_mask is not None

    def replace(self, **changes) -> "AttributedGraph":
        changes.setdefault("_adjacency", None)
        return dataclasses.replace(self, **changes)

    def subgraph(self, nodes: Sequence[int], name: str | None = None) -> "AttributedGraph":
        """Induced subgraph; nodes are relabelled in the given order and masks dropped."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.node_count, -1, dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))
        e = remap[self.edges]
        e = e[(e >= 0).all(axis=1)] if len(e) else e
        return AttributedGraph(
            features=self.features[nodes],
            edges=e,
            sensitive=None if self.sensitive is None else self.sensitive[nodes],
            labels=None if self.labels is None else self.labels[nodes],
            sensitive_cardinalities=self.sensitive_cardinalities,
            sensitive_names=self.sensitive_names,
            feature_names=self.feature_names,
            label_classes=self.label_classes,
            name=name or self.name,
        )

    def without_sensitive(self) -> "AttributedGraph":
        """Copy with sensitive values masked (cardinalities kept as adversary knowledge)."""
        return self.replace(sensitive=None)


# ---------------------------------------------------------------------------
# loading


@dataclass
class GraphSchema:
    """Column mapping for a node table plus a two-column edge list.

    ``sensitive_thresholds`` binarises continuous sensitive columns
    (value > threshold -> class 1). ``drop`` lists columns ignored entirely.
    """

    node_table: str
    edge_file: str
    sensitive: list[str]
    label: str | None = None
    drop: list[str] = field(default_factory=list)
    sensitive_thresholds: dict[str, float] = field(default_factory=dict)
    label_threshold: float | None = None
    id_column: str | None = None
    delimiter: str = ","
    name: str | None = None

    @classmethod
    def from_mapping(cls, m: dict, base_dir: str | None = None) -> "GraphSchema":
        def lst(v):
            if v is None:
                return []
            if isinstance(v, str):
                return [t.strip() for t in v.split(",") if t.strip()]
            return list(v)

        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(m) - known
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        if "node_table" not in m or "edge_file" not in m or "sensitive" not in m:
            raise SchemaError("schema needs node_table, edge_file and sensitive")
        thresholds = m.get("sensitive_thresholds") or {}
        if isinstance(thresholds, str):
            thresholds = {
                k.strip(): float(v) for k, v in (t.split(":") for t in thresholds.split(",") if t.strip())
            }
        node_table, edge_file = m["node_table"], m["edge_file"]
        if base_dir:
            node_table = os.path.join(base_dir, node_table)
            edge_file = os.path.join(base_dir, edge_file)
        lt = m.get("label_threshold")
        return cls(
            node_table=node_table,
            edge_file=edge_file,
            sensitive=lst(m["sensitive"]),
            label=m.get("label") or None,
            drop=lst(m.get("drop")),
            sensitive_thresholds={k: float(v) for k, v in thresholds.items()},
            label_threshold=None if lt in (None, "") else float(lt),
            id_column=m.get("id_column") or None,
            delimiter=m.get("delimiter", ","),
            name=m.get("name"),
        )


def _encode_categorical(col: pd.Series, threshold: float | None) -> tuple[np.ndarray, int]:
    if threshold is not None:
        codes = (pd.to_numeric(col).to_numpy(dtype=float) > threshold).astype(np.int64)
        return codes, 2
    values = np.sort(col.dropna().unique())
    lookup = {v: i for i, v in enumerate(values)}
    codes = col.map(lookup).to_numpy()
    if pd.isna(codes).any():
        raise SchemaError(f"column {col.name!r} has missing values")
    return codes.astype(np.int64), max(len(values), 2)


def read_edge_list(path: str, n: int, id_lookup: dict | None = None) -> np.ndarray:
    """Parse a whitespace/comma separated two-column integer edge list."""
    if os.path.getsize(path) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    raw = np.loadtxt(path, dtype=float, delimiter=None if not _has_comma(path) else ",", ndmin=2)
    if raw.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if raw.shape[1] < 2:
        raise SchemaError(f"edge file {path!r} must have two columns")
    raw = raw[:, :2]
    if not np.allclose(raw, np.round(raw)):
        raise SchemaError("edge endpoints must be integers")
    edges = np.round(raw).astype(np.int64)
    if id_lookup is not None:
        try:
            edges = np.vectorize(id_lookup.__getitem__, otypes=[np.int64])(edges)
        except KeyError as exc:
            raise SchemaError(f"edge endpoint {exc} not in node table") from None
    if edges.min() < 0 or edges.max() >= n:
        raise SchemaError(f"edge endpoint outside [0, {n})")
    return edges


def _has_comma(path: str) -> bool:
    with open(path) as fh:
        return "," in fh.readline()


def _check_symmetry(edges: np.ndarray) -> None:
    """Warn when some pairs are listed in both directions and others in one only."""
    if len(edges) == 0:
        return
    e = edges[edges[:, 0] != edges[:, 1]]
    fwd = set(map(tuple, e.tolist()))
    mirrored = sum((v, u) in fwd for u, v in fwd)
    if 0 < mirrored < len(fwd):
        logger.warning(
            "edge list is asymmetric (%d of %d directed pairs lack a reverse); symmetrizing",
            len(fwd) - mirrored,
            len(fwd),
        )


def load_graph(schema: GraphSchema | dict, base_dir: str | None = None) -> AttributedGraph:
    """Load a node table and an edge list into a validated graph.

    Sensitive columns are removed from the features. Non-numeric feature
    columns are one-hot encoded; non-numeric or multi-valued sensitive
    columns are factorised in sorted order.
    """
    if isinstance(schema, dict):
        schema = GraphSchema.from_mapping(schema, base_dir)
    if not os.path.exists(schema.node_table):
        raise SchemaError(f"node table not found: {schema.node_table}")
    if not os.path.exists(schema.edge_file):
        raise SchemaError(f"edge file not found: {schema.edge_file}")
    table = pd.read_csv(schema.node_table, sep=schema.delimiter, float_precision="round_trip")
    needed = list(schema.sensitive) + [c for c in (schema.label, schema.id_column) if c]
    missing = [c for c in needed + schema.drop if c not in table.columns]
    if missing:
        raise SchemaError(f"columns missing from node table: {missing}")
    if not schema.sensitive:
        raise SchemaError("at least one sensitive column is required")

    n = len(table)
    sens, cards = [], []
    for col in schema.sensitive:
        codes, card = _encode_categorical(table[col], schema.sensitive_thresholds.get(col))
        sens.append(codes)
        cards.append(card)
    labels = label_classes = None
    if schema.label:
        labels, label_classes = _encode_categorical(table[schema.label], schema.label_threshold)

    id_lookup = None
    if schema.id_column:
        id_lookup = {v: i for i, v in enumerate(table[schema.id_column].tolist())}
    feat = table.drop(columns=needed + schema.drop)
    non_numeric = [c for c in feat.columns if not pd.api.types.is_numeric_dtype(feat[c])]
    if non_numeric:
        feat = pd.get_dummies(feat, columns=non_numeric, dtype=float)
    x = feat.to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise SchemaError("feature columns contain missing or non-finite values")

    edges = read_edge_list(schema.edge_file, n, id_lookup)
    _check_symmetry(edges)
    return AttributedGraph(
        features=x,
        edges=edges,
        sensitive=np.stack(sens, axis=1) if n else np.zeros((0, len(sens)), dtype=np.int64),
        labels=labels,
        sensitive_cardinalities=tuple(cards),
        sensitive_names=tuple(schema.sensitive),
        feature_names=tuple(str(c) for c in feat.columns),
        label_classes=label_classes,
        name=schema.name or os.path.splitext(os.path.basename(schema.node_table))[0],
    )


# ---------------------------------------------------------------------------
# splitting


def split_victim_auxiliary(g: AttributedGraph, seed: int) -> tuple[AttributedGraph, AttributedGraph]:
    """Random half/half node partition into two induced subgraphs (victim, auxiliary).

    Edges crossing the partition are dropped.
    """
    if g.node_count < 2:
        raise ValueError("need at least two nodes to split")
    perm = np.random.default_rng(seed).permutation(g.node_count)
    half = (g.node_count + 1) // 2
    victim = g.subgraph(np.sort(perm[:half]), name=f"{g.name}-victim")
    aux = g.subgraph(np.sort(perm[half:]), name=f"{g.name}-aux")
    return victim, aux


def split_train_val_test(
    g: AttributedGraph, ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0
) -> AttributedGraph:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = g.node_count
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    n_test = int(np.floor(n * ratios[2] + 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[perm[:n_val]] = True
    test[perm[n_val : n_val + n_test]] = True
    train[perm[n_val + n_test :]] = True
    return g.replace(train_mask=train, val_mask=val, test_mask=test)


# ---------------------------------------------------------------------------
# features


def augment_features_with_labels(g: AttributedGraph, label_classes: int | None = None) -> np.ndarray:
    """Concatenate one-hot task labels to the features.

    Graphs without labels (or rows with a negative label) get a zero block of
    width ``label_classes``.
    """
    width = label_classes if label_classes is not None else g.label_classes
    if width is None:
        raise ValueError("label width unknown: pass label_classes for an unlabelled graph")
    block = np.zeros((g.node_count, width))
    if g.labels is not None:
        y = g.labels
        ok = (y >= 0) & (y < width)
        block[np.flatnonzero(ok), y[ok]] = 1.0
    return np.hstack([g.features, block])


def pca_project(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Project mean-centred ``x`` onto its top-``k`` principal axes.

    Returns the scores and the explained-variance ratio of each kept axis.
    Each axis is oriented so its largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if k < 1 or k > x.shape[1]:
        raise ValueError(f"k={k} must lie in [1, {x.shape[1]}]")
    xc = x - x.mean(axis=0)
    _, svals, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:k]
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    signs[signs == 0] = 1.0
    comps = comps * signs[:, None]
    var = svals**2
    total = var.sum()
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    scores = xc @ comps.T
    scores -= scores.mean(axis=0)
    return scores, ratio


def pca_align(x_aux: np.ndarray, x_target: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Reduce two feature matrices to a shared width ``k`` with per-graph PCA."""
    limit = min(x_aux.shape[1], x_target.shape[1])
    if k > limit:
        raise ValueError(f"k={k} exceeds the narrower feature width {limit}")
    return pca_project(x_aux, k)[0], pca_project(x_target, k)[0]


# ---------------------------------------------------------------------------
# structural statistics


def node_degree(g: AttributedGraph) -> np.ndarray:
    return np.asarray(g.adjacency.sum(axis=1)).ravel().astype(np.int64)


def node_homophily(g: AttributedGraph, sensitive: np.ndarray | None = None) -> np.ndarray:
    """Mean over attributes of the fraction of neighbours sharing the node's value.

    Isolated nodes get 0.
    """
    s = g.sensitive if sensitive is None else np.asarray(sensitive)
    if s is None:
        raise ValueError("node homophily needs sensitive attributes")
    if s.ndim == 1:
        s = s[:, None]
    deg = node_degree(g).astype(float)
    n = g.node_count
    agree = np.zeros(n)
    u, v = g.edges[:, 0], g.edges[:, 1]
    for i in range(s.shape[1]):
        same = (s[u, i] == s[v, i]).astype(float)
        agree += np.bincount(u, weights=same, minlength=n) + np.bincount(v, weights=same, minlength=n)
    out = np.zeros(n)
    nz = deg > 0
    out[nz] = agree[nz] / (deg[nz] * s.shape[1])
    return out


def edge_homophily(g: AttributedGraph, attribute: int = 0) -> float:
    """Fraction of edges whose endpoints share the given sensitive attribute."""
    if g.edge_count == 0:
        return 0.0
    s = g.sensitive[:, attribute]
    return float(np.mean(s[g.edges[:, 0]] == s[g.edges[:, 1]]))


def save_graph(g: AttributedGraph, directory: str, stem: str | None = None) -> GraphSchema:
    """Write ``g`` as a node table plus edge list; returns a schema that reloads it."""
    os.makedirs(directory, exist_ok=True)
    stem = stem or g.name
    names = list(g.feature_names) if len(g.feature_names) == g.features.shape[1] else [
        f"x{i}" for i in range(g.features.shape[1])
    ]
    table = pd.DataFrame(g.features, columns=names)
    sens_names = list(g.sensitive_names)
    if g.sensitive is not None:
        for i, col in enumerate(sens_names):
            table[col] = g.sensitive[:, i]
    label = None
    if g.labels is not None:
        label = "label"
        table[label] = g.labels
    node_path = os.path.join(directory, f"{stem}.csv")
    edge_path = os.path.join(directory, f"{stem}_edges.txt")
    table.to_csv(node_path, index=False, float_format="%.17g")
    np.savetxt(edge_path, g.edges, fmt="%d")
    return GraphSchema(
        node_table=node_path, edge_file=edge_path, sensitive=sens_names, label=label, name=g.name
    )
