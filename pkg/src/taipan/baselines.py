"""Reference attacks: prior-sampling guesses and independent single-task models."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from taipan.encoders import ACTIVATIONS, GnnEncoder, GnnEncoderConfig, GraphTensors
from taipan.model import FitHistory, TrainConfig, attack_loss, fit, probabilities
from taipan.metrics import multiclass_auc


def class_priors(sensitive: np.ndarray, cardinalities) -> list[np.ndarray]:
    """Empirical class frequencies per attribute."""
    sensitive = np.asarray(sensitive)
    return [
        np.bincount(sensitive[:, i], minlength=k) / len(sensitive) for i, k in enumerate(cardinalities)
    ]


def run_baseline_random(n_nodes: int, priors: list[np.ndarray], seed: int) -> list[np.ndarray]:
    """Sample every attribute of every node independently from its prior.

    Returns one-hot rows per task, so the sampled class doubles as the score.
    """
    rng = np.random.default_rng(seed)
    out = []
    for p in priors:
        p = np.asarray(p, dtype=np.float64)
        draws = rng.choice(len(p), size=n_nodes, p=p / p.sum())
        out.append(np.eye(len(p))[draws])
    return out


class SingleTaskModel(nn.Module):
    """One GNN expert and one head: no hierarchy, gates or tokens."""

    def __init__(self, in_dim: int, n_classes: int, encoder: GnnEncoderConfig):
        super().__init__()
        self.expert = GnnEncoder(in_dim, encoder)
        self.act = ACTIVATIONS[encoder.activation]
        self.head = nn.Linear(encoder.hidden_dim, n_classes)
        self.double()

    def forward(self, gt: GraphTensors, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.act(self.expert(gt, x)))


def run_baseline_single(
    aux_gt: GraphTensors,
    x_aux,
    sensitive_aux,
    cardinalities,
    train_mask,
    val_mask,
    target_gt: GraphTensors,
    x_target,
    encoder: GnnEncoderConfig,
    cfg: TrainConfig,
) -> tuple[list[np.ndarray], list[SingleTaskModel], list[FitHistory]]:
    """Train one model per attribute on the auxiliary graph and apply each to the target."""
    xa = torch.as_tensor(x_aux, dtype=torch.float64)
    xt = torch.as_tensor(x_target, dtype=torch.float64)
    s_np = np.asarray(sensitive_aux)
    tr = torch.as_tensor(np.asarray(train_mask), dtype=torch.bool)
    va = np.asarray(val_mask, dtype=bool)
    probs, models, hists = [], [], []
    for i, k in enumerate(cardinalities):
        torch.manual_seed(cfg.seed + i)
        m = SingleTaskModel(xa.shape[1], k, encoder)
        y = torch.as_tensor(s_np[:, i : i + 1], dtype=torch.long)

        def loss_fn(m=m, y=y):
            return attack_loss([m(aux_gt, xa)], y, [1.0], tr)

        def score_fn(m=m, i=i):
            v = multiclass_auc(s_np[va, i], probabilities(m(aux_gt, xa)[va]))
            return 0.5 if v is None else v

        hists.append(fit(m, loss_fn, score_fn, cfg))
        with torch.no_grad():
            probs.append(probabilities(m(target_gt, xt)))
        models.append(m)
    return probs, models, hists
