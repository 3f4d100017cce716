"""Model-free leakage audit, group-fairness deltas and per-node vulnerability."""
from __future__ import annotations

import logging

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.stats import spearmanr

from taipan.dcor import distance_correlation
from taipan.graph import AttributedGraph, node_degree, node_homophily
from taipan.profiler import encode_sensitive

logger = logging.getLogger(__name__)


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def linear_gcn_embeddings(g: AttributedGraph, hidden_dim: int = 16, seed: int = 0) -> np.ndarray:
    """Two propagation rounds of a GCN with no activation and fixed orthogonal weights."""
    n = g.node_count
    a_hat = g.adjacency + sp.eye(n, format="csr")
    d = 1.0 / np.sqrt(np.asarray(a_hat.sum(axis=1)).ravel())
    norm = sp.diags(d) @ a_hat @ sp.diags(d)
    rng = np.random.default_rng(seed)
    w1 = _orthogonal(rng, g.features.shape[1], hidden_dim)
    w2 = _orthogonal(rng, hidden_dim, hidden_dim)
    return norm @ (norm @ (g.features @ w1)) @ w2


def sensitive_correlation_audit(
    g: AttributedGraph,
    sensitive: np.ndarray | None = None,
    hidden_dim: int = 16,
    seed: int = 0,
    max_nodes: int = 2000,
) -> float:
    """dCor between linear-GCN embeddings and the sensitive attributes, x100.

    Called ODC on an original graph and DDC on a defended / synthesised one.
    """
    s = g.sensitive if sensitive is None else np.asarray(sensitive)
    if s is None:
        raise ValueError("audit needs sensitive attributes")
    if s.ndim == 1:
        s = s[:, None]
    z = linear_gcn_embeddings(g, hidden_dim, seed)
    s_enc = np.hstack(encode_sensitive(s, g.sensitive_cardinalities or None))
    n = g.node_count
    if n > max_nodes:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=max_nodes, replace=False))
        z, s_enc = z[idx], s_enc[idx]
    return 100.0 * distance_correlation(z, s_enc)


def _group_rate(pred: np.ndarray, mask: np.ndarray) -> float | None:
    return float(pred[mask].mean()) if mask.any() else None


def fairness_metrics(predictions, sensitive, labels) -> list[dict]:
    """Statistical parity and equalized odds differences (x100) per binary attribute.

    Equalized odds is the larger of the TPR gap and the FPR gap. Values that
    need an empty group are reported as None with a flag.
    """
    pred = np.asarray(predictions).astype(int)
    y = np.asarray(labels).astype(int)
    s = np.asarray(sensitive)
    if s.ndim == 1:
        s = s[:, None]
    out = []
    for i in range(s.shape[1]):
        g0, g1 = s[:, i] == 0, s[:, i] == 1
        rec: dict = {"attribute": i, "flags": []}
        r0, r1 = _group_rate(pred, g0), _group_rate(pred, g1)
        if r0 is None or r1 is None:
            rec["SP"] = None
            rec["flags"].append("empty sensitive group")
        else:
            rec["SP"] = 100.0 * abs(r0 - r1)
        gaps = []
        for yv in (1, 0):
            a, b = _group_rate(pred, g0 & (y == yv)), _group_rate(pred, g1 & (y == yv))
            if a is None or b is None:
                rec["flags"].append(f"empty group for label {yv}")
            else:
                gaps.append(abs(a - b))
        rec["EO"] = 100.0 * max(gaps) if len(gaps) == 2 else None
        out.append(rec)
    return out


def vulnerability_profile(g: AttributedGraph, s_pred, s_true) -> tuple[pd.DataFrame, dict]:
    """Per-node degree, homophily, share of attributes inferred, all-correct flag.

    Also returns Spearman correlations of degree and homophily against node accuracy
    (NaN when either column is constant).
    """
    s_pred = np.asarray(s_pred)
    s_true = np.asarray(s_true)
    if s_pred.ndim == 1:
        s_pred, s_true = s_pred[:, None], s_true[:, None]
    correct = s_pred == s_true
    table = pd.DataFrame(
        {
            "node": np.arange(g.node_count),
            "degree": node_degree(g),
            "homophily": node_homophily(g, s_true),
            "node_accuracy": correct.mean(axis=1),
            "subset_hit": correct.all(axis=1).astype(int),
        }
    )
    corr = {}
    for col in ("degree", "homophily"):
        a, b = table[col].to_numpy(), table["node_accuracy"].to_numpy()
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            corr[f"spearman_{col}"] = float("nan")
        else:
            corr[f"spearman_{col}"] = float(spearmanr(a, b).statistic)
    return table, corr
