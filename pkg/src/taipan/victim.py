"""Supervised node classification on the task labels (victim utility reference)."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from taipan.encoders import GnnEncoder, GnnEncoderConfig, GraphTensors
from taipan.graph import AttributedGraph
from taipan.metrics import auc_score, f1_score
from taipan.model import FitHistory, TrainConfig, fit, probabilities


class NodeClassifier(nn.Module):
    """GNN encoder followed by a linear head."""

    def __init__(self, in_dim: int, n_classes: int, encoder: GnnEncoderConfig):
        super().__init__()
        self.encoder = GnnEncoder(in_dim, encoder)
        self.head = nn.Linear(encoder.hidden_dim, n_classes)
        self.double()

    def forward(self, gt: GraphTensors, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(gt, x))


def utility_metrics(y_true: np.ndarray, probs: np.ndarray) -> dict:
    pred = np.argmax(probs, axis=1)
    auc = auc_score(y_true == 1, probs[:, 1]) if probs.shape[1] == 2 else None
    return {
        "AUC": None if auc is None else 100.0 * auc,
        "ACC": 100.0 * float(np.mean(pred == y_true)),
        "F1": 100.0 * f1_score(y_true, pred, positive=1),
    }


def train_node_classifier(
    encoder: GnnEncoderConfig, g: AttributedGraph, cfg: TrainConfig
) -> tuple[NodeClassifier, dict, FitHistory]:
    """Fit on the train mask, select by validation AUC, report test AUC/ACC/F1."""
    if g.labels is None:
        raise ValueError("graph has no task labels")
    if not g.has_masks:
        raise ValueError("graph has no train/val/test masks")
    y_np = g.labels
    if len(np.unique(y_np[g.train_mask])) < 2:
        raise ValueError("task labels have a single class on the training nodes")
    n_classes = int(g.label_classes)
    torch.manual_seed(cfg.seed)
    clf = NodeClassifier(g.features.shape[1], n_classes, encoder)
    gt = GraphTensors.from_graph(g)
    x = torch.as_tensor(g.features, dtype=torch.float64)
    y = torch.as_tensor(y_np, dtype=torch.long)
    tr = torch.as_tensor(g.train_mask)
    va = g.val_mask

    def loss_fn():
        return F.cross_entropy(clf(gt, x)[tr], y[tr])

    def score_fn():
        p = probabilities(clf(gt, x)[va])
        auc = auc_score(y_np[va] == 1, p[:, 1]) if n_classes == 2 else None
        return float(np.mean(np.argmax(p, axis=1) == y_np[va])) if auc is None else auc

    hist = fit(clf, loss_fn, score_fn, cfg)
    with torch.no_grad():
        probs = probabilities(clf(gt, x))
    return clf, utility_metrics(y_np[g.test_mask], probs[g.test_mask]), hist
