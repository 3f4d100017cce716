"""The eight-metric evaluation for multiple sensitive attribute inference.

All metric values are percentages. Binary attributes are the supported case;
multi-class attributes get one-vs-rest macro AUC so nothing crashes.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from taipan.dcor import distance_correlation
from taipan.profiler import encode_sensitive

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
METRIC_KEYS = ("AA", "AF", "TDA", "TDF", "HD", "SuA", "SD", "LC")


def auc_score(y_true: np.ndarray, score: np.ndarray) -> float | None:
    """Binary ROC AUC via the Mann-Whitney rank statistic (ties -> midranks).

    Returns None when only one class is present.
    """
    y = np.asarray(y_true).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(score)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def multiclass_auc(y_true: np.ndarray, probs: np.ndarray) -> float | None:
    probs = np.asarray(probs)
    if probs.shape[1] == 2:
        return auc_score(y_true == 1, probs[:, 1])
    vals = [auc_score(y_true == k, probs[:, k]) for k in range(probs.shape[1])]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def minority_class(y_true: np.ndarray, n_classes: int = 2) -> int:
    counts = np.bincount(np.asarray(y_true), minlength=n_classes)
    # ties go to the higher index, so a balanced binary attribute uses class 1
    return int(len(counts) - 1 - np.argmin(counts[::-1]))


def f1_score(y_true: np.ndarray, y_pred: np.ndarray, positive: int) -> float:
    t = np.asarray(y_true) == positive
    p = np.asarray(y_pred) == positive
    tp = int(np.sum(t & p))
    denom = 2 * tp + int(np.sum(~t & p)) + int(np.sum(t & ~p))
    return 0.0 if denom == 0 else 2.0 * tp / denom


def _as_matrix(s) -> np.ndarray:
    s = np.asarray(s)
    return s[:, None] if s.ndim == 1 else s


def confidence_metrics(probs: list[np.ndarray], s_true: np.ndarray) -> dict:
    """AA, AF, TDA, TDF plus per-task AUC/F1 (all x100).

    A task whose truth has a single class gets AUC 50 and ``auc_defined=False``.
    """
    s_true = _as_matrix(s_true)
    per_task = []
    for i, p in enumerate(probs):
        p = np.asarray(p)
        y = s_true[:, i]
        auc = multiclass_auc(y, p)
        pred = np.argmax(p, axis=1)
        pos = minority_class(y, p.shape[1])
        per_task.append(
            {
                "auc": 50.0 if auc is None else 100.0 * auc,
                "auc_defined": auc is not None,
                "f1": 100.0 * f1_score(y, pred, pos),
                "f1_positive_class": pos,
            }
        )
        if auc is None:
            logger.warning("task %d has a single class in the evaluated nodes; AUC set to 50", i)
    aucs = np.array([t["auc"] for t in per_task])
    f1s = np.array([t["f1"] for t in per_task])
    return {
        "AA": float(aucs.mean()),
        "AF": float(f1s.mean()),
        "TDA": float(aucs.max() - aucs.min()),
        "TDF": float(f1s.max() - f1s.min()),
        "per_task": per_task,
    }


def hamming_distance(s_pred, s_true) -> float:
    s_pred, s_true = _as_matrix(s_pred), _as_matrix(s_true)
    if s_pred.shape != s_true.shape:
        raise ValueError(f"shape mismatch {s_pred.shape} vs {s_true.shape}")
    return float(100.0 * np.mean(np.mean(s_pred != s_true, axis=1)))


def subset_accuracy(s_pred, s_true) -> float:
    """Share of nodes whose every attribute is inferred correctly (no 1/s factor)."""
    s_pred, s_true = _as_matrix(s_pred), _as_matrix(s_true)
    if s_pred.shape != s_true.shape:
        raise ValueError(f"shape mismatch {s_pred.shape} vs {s_true.shape}")
    return float(100.0 * np.mean(np.all(s_pred == s_true, axis=1)))


def _encoded(s, cardinalities) -> np.ndarray:
    return np.hstack(encode_sensitive(_as_matrix(s), cardinalities))


def semantic_difference(s_pred, s_true, x, cardinalities=None) -> float:
    """Signed dCor(pred, X) - dCor(truth, X), x100."""
    if cardinalities is None:
        both = np.vstack([_as_matrix(s_pred), _as_matrix(s_true)])
        cardinalities = [max(int(both[:, i].max()) + 1, 2) for i in range(both.shape[1])]
    return 100.0 * (
        distance_correlation(_encoded(s_pred, cardinalities), x)
        - distance_correlation(_encoded(s_true, cardinalities), x)
    )


def label_consistency(s_pred, s_true, cardinalities=None) -> float:
    if cardinalities is None:
        both = np.vstack([_as_matrix(s_pred), _as_matrix(s_true)])
        cardinalities = [max(int(both[:, i].max()) + 1, 2) for i in range(both.shape[1])]
    return 100.0 * distance_correlation(_encoded(s_pred, cardinalities), _encoded(s_true, cardinalities))


@dataclass
class MetricsReport:
    AA: float
    AF: float
    TDA: float
    TDF: float
    HD: float
    SuA: float
    SD: float
    LC: float
    per_task: list[dict] = field(default_factory=list)
    audit: dict = field(default_factory=dict)
    fairness: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = REPORT_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d.pop("version", None)
        return cls(**d)


def evaluate_attack(
    probs: list[np.ndarray],
    s_true: np.ndarray,
    x: np.ndarray,
    cardinalities=None,
    max_nodes: int = 2000,
    seed: int = 0,
) -> MetricsReport:
    """All eight metrics for per-task probability rows against the truth.

    dCor-based metrics subsample to ``max_nodes`` rows with a fixed seed.
    """
    s_true = _as_matrix(s_true)
    s_pred = np.stack([np.argmax(np.asarray(p), axis=1) for p in probs], axis=1)
    conf = confidence_metrics(probs, s_true)
    n = s_true.shape[0]
    idx = np.arange(n)
    if n > max_nodes:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=max_nodes, replace=False))
    sd = semantic_difference(s_pred[idx], s_true[idx], np.asarray(x)[idx], cardinalities)
    lc = label_consistency(s_pred[idx], s_true[idx], cardinalities)
    return MetricsReport(
        AA=conf["AA"],
        AF=conf["AF"],
        TDA=conf["TDA"],
        TDF=conf["TDF"],
        HD=hamming_distance(s_pred, s_true),
        SuA=subset_accuracy(s_pred, s_true),
        SD=sd,
        LC=lc,
        per_task=conf["per_task"],
    )
