"""Hierarchical multi-gate mixture-of-experts attack model with pretext tokens."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from taipan.encoders import ACTIVATIONS, GateNetwork, GnnEncoder, GnnEncoderConfig, GraphTensors, UniformGate
from taipan.metrics import multiclass_auc
from taipan.profiler import AttackHierarchy

logger = logging.getLogger(__name__)

TOKEN_PREFIX = "token_"


class TrainingDivergence(RuntimeError):
    """Raised when a loss becomes NaN or infinite."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 200
    seed: int = 0
    early_stop_patience: int | None = 100
    loss_reduction: str = "mean"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.loss_reduction != "mean":
            raise ValueError("only mean reduction is supported")


class TaipanOutput(NamedTuple):
    logits: list[torch.Tensor]
    z_clusters: list[torch.Tensor]
    z_h1: torch.Tensor
    z_tasks: list[torch.Tensor]


class TaipanModel(nn.Module):
    """Experts, gates, heads and pretext tokens laid out along an attack hierarchy.

    Level one: a shared expert ``expert_h1`` and one expert per cluster,
    mixed per cluster by ``gate_l[j]`` and globally by ``gate_h``. Level two:
    each task mixes its own expert applied to its cluster embedding with the
    shared ``expert_h2`` applied to the global embedding, via ``gate_p[i]``.
    Tokens multiply the input and each first-level / task expert output.
    """

    def __init__(
        self,
        in_dim: int,
        cardinalities: tuple[int, ...] | list[int],
        hierarchy: AttackHierarchy,
        encoder: GnnEncoderConfig | None = None,
        use_tokens: bool = True,
        use_gating: bool = True,
        gate_hidden: int | None = None,
    ):
        super().__init__()
        hierarchy.validate()
        if hierarchy.num_tasks != len(cardinalities):
            raise ValueError(
                f"hierarchy covers {hierarchy.num_tasks} tasks but {len(cardinalities)} attributes given"
            )
        self.in_dim = in_dim
        self.cardinalities = tuple(int(c) for c in cardinalities)
        self.hierarchy = hierarchy
        self.encoder_config = encoder = encoder or GnnEncoderConfig()
        self.use_tokens = use_tokens
        self.use_gating = use_gating
        self.act = ACTIVATIONS[encoder.activation]
        hid = encoder.hidden_dim
        gate_hidden = gate_hidden or hid
        self.gate_hidden = gate_hidden
        c = len(hierarchy.clusters)
        s = len(self.cardinalities)
        self.task_cluster = [hierarchy.cluster_of(i) for i in range(s)]

        def gate(d_in, k):
            return GateNetwork(d_in, k, gate_hidden, encoder.activation) if use_gating else UniformGate(k)

        self.expert_h1 = GnnEncoder(in_dim, encoder)
        self.expert_l = nn.ModuleList(GnnEncoder(in_dim, encoder) for _ in range(c))
        self.expert_p = nn.ModuleList(GnnEncoder(hid, encoder) for _ in range(s))
        self.expert_h2 = GnnEncoder(hid, encoder)
        self.gate_h = gate(in_dim, 1 + c)
        self.gate_l = nn.ModuleList(gate(in_dim, 2) for _ in range(c))
        self.gate_p = nn.ModuleList(gate(hid, 2) for _ in range(s))
        self.head = nn.ModuleList(nn.Linear(hid, k) for k in self.cardinalities)
        if use_tokens:
            self.token_h1 = nn.Parameter(torch.ones(in_dim))
            self.token_h2 = nn.Parameter(torch.ones(hid))
            self.token_l = nn.ParameterList(nn.Parameter(torch.ones(hid)) for _ in range(c))
            self.token_p = nn.ParameterList(nn.Parameter(torch.ones(hid)) for _ in range(s))
        self.double()

    @property
    def num_tasks(self) -> int:
        return len(self.cardinalities)

    def _tok(self, x: torch.Tensor, name: str, idx: int | None = None) -> torch.Tensor:
        if not self.use_tokens:
            return x
        tok = getattr(self, name)
        return x * (tok if idx is None else tok[idx])

    def forward(self, gt: GraphTensors, x: torch.Tensor) -> TaipanOutput:
        if x.shape[1] != self.in_dim:
            raise ValueError(
                f"input width {x.shape[1]} != model width {self.in_dim}; align features with pca_align first"
            )
        x = self._tok(x, "token_h1")
        e_h1 = self._tok(self.expert_h1(gt, x), "token_h2")
        e_l = [self._tok(self.expert_l[j](gt, x), "token_l", j) for j in range(len(self.expert_l))]

        z_clusters = []
        for j, e in enumerate(e_l):
            g = self.gate_l[j](x)
            z_clusters.append(g[:, 0:1] * e_h1 + g[:, 1:2] * e)
        g_h = self.gate_h(x)
        stacked = torch.stack([e_h1] + e_l, dim=1)
        z_h1 = (g_h.unsqueeze(-1) * stacked).sum(dim=1)
        shared2 = self.expert_h2(gt, z_h1)

        logits, z_tasks = [], []
        for i in range(self.num_tasks):
            zc = z_clusters[self.task_cluster[i]]
            e_p = self._tok(self.expert_p[i](gt, zc), "token_p", i)
            g = self.gate_p[i](zc)
            z = g[:, 0:1] * e_p + g[:, 1:2] * shared2
            z_tasks.append(z)
            logits.append(self.head[i](self.act(z)))
        return TaipanOutput(logits, z_clusters, z_h1, z_tasks)

    # parameter groups -------------------------------------------------
    def token_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if n.startswith(TOKEN_PREFIX)]

    def freeze_backbone(self, frozen: bool = True) -> None:
        for n, p in self.named_parameters():
            p.requires_grad_(n.startswith(TOKEN_PREFIX) or not frozen)

    @property
    def frozen_backbone(self) -> bool:
        return not any(p.requires_grad for n, p in self.named_parameters() if not n.startswith(TOKEN_PREFIX))

    def architecture(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "cardinalities": list(self.cardinalities),
            "hierarchy": self.hierarchy.to_dict(),
            "encoder": asdict(self.encoder_config),
            "use_tokens": self.use_tokens,
            "use_gating": self.use_gating,
            "gate_hidden": self.gate_hidden,
        }

    @classmethod
    def from_architecture(cls, arch: dict) -> "TaipanModel":
        return cls(
            in_dim=arch["in_dim"],
            cardinalities=arch["cardinalities"],
            hierarchy=AttackHierarchy.from_dict(arch["hierarchy"]),
            encoder=GnnEncoderConfig(**arch["encoder"]),
            use_tokens=arch["use_tokens"],
            use_gating=arch["use_gating"],
            gate_hidden=arch["gate_hidden"],
        )


def attack_loss(
    logits: list[torch.Tensor],
    targets: torch.Tensor,
    weights,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Weighted sum over tasks of mean cross-entropy on the masked nodes."""
    total = logits[0].new_zeros(())
    for i, lg in enumerate(logits):
        w = float(weights[i])
        if w == 0.0:
            continue
        y = targets[:, i]
        if mask is not None:
            lg, y = lg[mask], y[mask]
        if len(y) == 0:
            continue
        total = total + w * F.cross_entropy(lg, y, reduction="mean")
    return total


pretrain_loss = attack_loss


@dataclass
class TaskPrediction:
    labels: np.ndarray
    confidence: np.ndarray
    probs: np.ndarray


def probabilities(logits: torch.Tensor) -> np.ndarray:
    return torch.softmax(logits.detach(), dim=-1).cpu().numpy()


def predict_from_logits(logits: list[torch.Tensor]) -> list[TaskPrediction]:
    out = []
    for lg in logits:
        p = probabilities(lg)
        # np.argmax returns the first maximum, i.e. the lowest class index on ties
        out.append(TaskPrediction(np.argmax(p, axis=1), p.max(axis=1), p))
    return out


@torch.no_grad()
def predict_with_confidence(model: TaipanModel, gt: GraphTensors, x) -> list[TaskPrediction]:
    x = torch.as_tensor(x, dtype=torch.float64)
    if x.shape[1] != model.in_dim:
        raise ValueError(
            f"feature width {x.shape[1]} does not match the model ({model.in_dim}); "
            "project both graphs with pca_align"
        )
    was_training = model.training
    model.eval()
    out = model(gt, x)
    model.train(was_training)
    return predict_from_logits(out.logits)


def mean_auc(probs: list[np.ndarray], targets: np.ndarray) -> float:
    vals = [multiclass_auc(targets[:, i], p) for i, p in enumerate(probs)]
    vals = [0.5 if v is None else v for v in vals]
    return float(np.mean(vals))


@dataclass
class FitHistory:
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_score: float | None = None
    stopped_early: bool = False


def fit(
    module: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    score_fn: Callable[[], float],
    cfg: TrainConfig,
    parameters=None,
) -> FitHistory:
    """Full-batch Adam training with validation-score checkpoint selection.

    ``loss_fn`` runs a training-mode forward pass; ``score_fn`` an eval-mode
    one. The best-scoring state is restored at the end.
    """
    hist = FitHistory()
    if cfg.epochs == 0:
        return hist
    torch.manual_seed(cfg.seed)
    params = [p for p in (parameters or module.parameters()) if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    best_state = copy.deepcopy(module.state_dict())
    best, since = -np.inf, 0
    for epoch in range(cfg.epochs):
        module.train()
        opt.zero_grad()
        loss = loss_fn()
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"non-finite training loss {loss.item()} at epoch {epoch}")
        loss.backward()
        opt.step()
        module.eval()
        with torch.no_grad():
            score = score_fn()
        hist.records.append({"epoch": epoch, "loss": float(loss.item()), "val_score": score})
        if score > best:
            best, since = score, 0
            hist.best_epoch, hist.best_score = epoch, score
            best_state = copy.deepcopy(module.state_dict())
        else:
            since += 1
            if cfg.early_stop_patience is not None and since >= cfg.early_stop_patience:
                hist.stopped_early = True
                break
    module.load_state_dict(best_state)
    module.eval()
    return hist


def pretrain(
    model: TaipanModel,
    gt: GraphTensors,
    x_star,
    sensitive,
    weights,
    train_mask,
    val_mask,
    cfg: TrainConfig,
) -> FitHistory:
    """Train every parameter on the auxiliary graph; keep the best mean validation AUC."""
    x = torch.as_tensor(x_star, dtype=torch.float64)
    y = torch.as_tensor(np.asarray(sensitive), dtype=torch.long)
    tr = torch.as_tensor(np.asarray(train_mask), dtype=torch.bool)
    va = np.asarray(val_mask, dtype=bool)
    y_val = np.asarray(sensitive)[va]
    model.freeze_backbone(False)

    def loss_fn():
        return attack_loss(model(gt, x).logits, y, weights, tr)

    def score_fn():
        out = model(gt, x)
        return mean_auc([probabilities(lg[va]) for lg in out.logits], y_val)

    return fit(model, loss_fn, score_fn, cfg)


# checkpoints ---------------------------------------------------------------


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(model: TaipanModel, directory: str, extra: dict | None = None) -> str:
    """Write ``params.npz`` (named parameters) and ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(os.path.join(directory, "params.npz"), **state)
    manifest = {
        "architecture": model.architecture(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "token_entries": sorted(k for k in state if k.startswith(TOKEN_PREFIX)),
        "extra": extra or {},
    }
    manifest["config_hash"] = config_hash(
        {"architecture": manifest["architecture"], "extra": manifest["extra"]}
    )
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return directory


def load_checkpoint(directory: str) -> tuple[TaipanModel, dict]:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    model = TaipanModel.from_architecture(manifest["architecture"])
    with np.load(os.path.join(directory, "params.npz")) as arc:
        state = {k: torch.from_numpy(arc[k]) for k in arc.files}
    model.load_state_dict(state)
    model.eval()
    return model, manifest


def parameter_archive(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def archive_diff(before: dict[str, np.ndarray], after: dict[str, np.ndarray]) -> list[str]:
    """Names of entries whose values are not bit-identical."""
    keys = set(before) | set(after)
    return sorted(
        k for k in keys if k not in before or k not in after or not np.array_equal(before[k], after[k])
    )
