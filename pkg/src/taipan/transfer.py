"""Prompt-only unsupervised adaptation of a pre-trained attack model to a target graph.

Only pretext tokens are optimised. Confident target predictions are kept as
pseudo labels; the rest are pulled towards per-class prototypes by an
entropy loss on prototype-cosine softmax.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from taipan.encoders import GraphTensors
from taipan.model import TaipanModel, TaipanOutput, attack_loss

logger = logging.getLogger(__name__)

MIN_THRESHOLD = 1e-6


@dataclass
class AdaptationConfig:
    threshold: float = 0.7
    momentum: float = 0.9
    temperature: float = 0.1
    steps: int = 20
    learning_rate: float = 0.005
    weight_decay: float = 0.0
    seed: int = 0
    relabel_each_step: bool = False
    source_adjust: bool = True

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.steps < 0 or self.learning_rate <= 0:
            raise ValueError("steps must be >= 0 and learning_rate > 0")


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    retained: np.ndarray
    confidence: np.ndarray
    threshold: float

    @property
    def retained_counts(self) -> list[int]:
        return self.retained.sum(axis=0).astype(int).tolist()


def pseudo_labels_from_logits(logits: list[torch.Tensor], threshold: float) -> PseudoLabelSet:
    gamma = max(float(threshold), MIN_THRESHOLD)
    probs = [torch.softmax(lg.detach(), dim=-1).cpu().numpy() for lg in logits]
    labels = np.stack([np.argmax(p, axis=1) for p in probs], axis=1)
    conf = np.stack([p.max(axis=1) for p in probs], axis=1)
    return PseudoLabelSet(labels, conf >= gamma, conf, gamma)


@torch.no_grad()
def pseudo_label(model: TaipanModel, gt: GraphTensors, x, threshold: float) -> PseudoLabelSet:
    """Argmax labels of the model with a per-(node, task) confidence filter."""
    was = model.training
    model.eval()
    out = model(gt, torch.as_tensor(x, dtype=torch.float64))
    model.train(was)
    return pseudo_labels_from_logits(out.logits, threshold)


def confidence_tuning_loss(
    logits_aux: list[torch.Tensor],
    s_aux: torch.Tensor,
    aux_mask: torch.Tensor | None,
    logits_target: list[torch.Tensor],
    pseudo: PseudoLabelSet,
    weights,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (supervised auxiliary loss, weighted pseudo-label loss on retained pairs)."""
    l_att = attack_loss(logits_aux, s_aux, weights, aux_mask)
    l_pseudo = logits_target[0].new_zeros(())
    if not pseudo.retained.any():
        logger.warning("no (node, task) pair passed the confidence threshold; pseudo-label term is 0")
        return l_att, l_pseudo
    labels = torch.as_tensor(pseudo.labels, dtype=torch.long)
    for i, lg in enumerate(logits_target):
        keep = torch.as_tensor(pseudo.retained[:, i])
        w = float(weights[i])
        if w == 0.0 or not keep.any():
            continue
        l_pseudo = l_pseudo + w * F.cross_entropy(lg[keep], labels[keep, i], reduction="mean")
    return l_att, l_pseudo


@dataclass
class PrototypeBank:
    """Per-task class centroids; ``empty[i][k]`` marks classes with no contributor."""

    prototypes: list[torch.Tensor]
    empty: list[np.ndarray]
    momentum: float = 0.9
    step: int = 0

    def copy(self) -> "PrototypeBank":
        return PrototypeBank([p.clone() for p in self.prototypes], [e.copy() for e in self.empty], self.momentum, self.step)

    def distance(self, other: "PrototypeBank") -> float:
        return float(sum(torch.linalg.norm(a - b).item() ** 2 for a, b in zip(self.prototypes, other.prototypes)) ** 0.5)


def class_means(
    embeddings: list[torch.Tensor], labels: np.ndarray, include: np.ndarray, cardinalities
) -> tuple[list[torch.Tensor], list[np.ndarray]]:
    protos, empty = [], []
    labels = np.asarray(labels)
    include = np.asarray(include, dtype=bool)
    for i, k in enumerate(cardinalities):
        z = embeddings[i].detach()
        c = z.new_zeros((k, z.shape[1]))
        flags = np.zeros(k, dtype=bool)
        for cls in range(k):
            sel = np.flatnonzero(include[:, i] & (labels[:, i] == cls))
            if len(sel) == 0:
                flags[cls] = True
            else:
                c[cls] = z[torch.as_tensor(sel)].mean(dim=0)
        protos.append(c)
        empty.append(flags)
    return protos, empty


def init_prototypes(
    embeddings: list[torch.Tensor], labels: np.ndarray, include: np.ndarray, cardinalities, momentum: float = 0.9
) -> PrototypeBank:
    """Class-mean embeddings per task over the included (node, task) pairs.

    Callers stack auxiliary nodes (ground truth) with target nodes (pseudo
    labels) and mark filtered target pairs as not included. A class with no
    contributor gets a zero prototype and an ``empty`` flag.
    """
    protos, empty = class_means(embeddings, labels, include, cardinalities)
    for i, flags in enumerate(empty):
        if flags.any():
            logger.warning("task %d: no contributing nodes for classes %s", i, np.flatnonzero(flags).tolist())
    return PrototypeBank(protos, empty, momentum, 0)


def ema_update(bank: PrototypeBank, new: PrototypeBank | list[torch.Tensor], alpha: float | None = None) -> PrototypeBank:
    """alpha * previous + (1 - alpha) * new, per class.

    Classes flagged empty in ``new`` keep their previous prototype.
    """
    alpha = bank.momentum if alpha is None else alpha
    if isinstance(new, PrototypeBank):
        new_p, new_empty = new.prototypes, new.empty
    else:
        new_p, new_empty = new, [np.zeros(len(p), dtype=bool) for p in new]
    if len(new_p) != len(bank.prototypes):
        raise ValueError("prototype banks cover different task counts")
    out, empty = [], []
    for prev, cur, prev_e, cur_e in zip(bank.prototypes, new_p, bank.empty, new_empty):
        if prev.shape != cur.shape:
            raise ValueError(f"prototype shape mismatch {tuple(prev.shape)} vs {tuple(cur.shape)}")
        mixed = alpha * prev + (1.0 - alpha) * cur
        keep = torch.as_tensor(cur_e)
        if keep.any():
            mixed[keep] = prev[keep]
        out.append(mixed)
        empty.append(prev_e & cur_e)
    return PrototypeBank(out, empty, bank.momentum, bank.step + 1)


def prototype_probabilities(z: torch.Tensor, prototypes: torch.Tensor, temperature: float) -> torch.Tensor:
    """softmax(cos(z, C_k) / tau); zero-norm vectors give cosine 0."""
    cos = F.normalize(z, dim=-1, eps=1e-12) @ F.normalize(prototypes, dim=-1, eps=1e-12).T
    return torch.softmax(cos / temperature, dim=-1)


def filtered_entropy_loss(
    embeddings: list[torch.Tensor], filtered: np.ndarray, bank: PrototypeBank, temperature: float
) -> torch.Tensor:
    """Mean entropy of prototype-similarity predictions over filtered (node, task) pairs."""
    filtered = np.asarray(filtered, dtype=bool)
    total = embeddings[0].new_zeros(())
    count = int(filtered.sum())
    if count == 0:
        return total
    for i, z in enumerate(embeddings):
        sel = filtered[:, i]
        if not sel.any():
            continue
        p = prototype_probabilities(z[torch.as_tensor(sel)], bank.prototypes[i], temperature)
        total = total - (p * torch.log(p.clamp_min(1e-300))).sum()
    return total / count


@dataclass
class AdaptationResult:
    model: TaipanModel
    trajectory: list[dict] = field(default_factory=list)
    pseudo: PseudoLabelSet | None = None
    bank: PrototypeBank | None = None
    aborted: bool = False


class _Inputs:
    def __init__(self, aux_gt, x_aux, s_aux, aux_mask, target_gt, x_target):
        self.aux_gt, self.target_gt = aux_gt, target_gt
        self.xa = torch.as_tensor(x_aux, dtype=torch.float64)
        self.xt = torch.as_tensor(x_target, dtype=torch.float64)
        self.s_aux_np = np.asarray(s_aux)
        self.sa = torch.as_tensor(self.s_aux_np, dtype=torch.long)
        self.mask = None if aux_mask is None else torch.as_tensor(np.asarray(aux_mask), dtype=torch.bool)


def _bank_sources(inp: _Inputs, out_a: TaipanOutput, out_t: TaipanOutput, pseudo: PseudoLabelSet, source_adjust: bool):
    n_a = inp.xa.shape[0]
    z = [torch.cat([za, zt], dim=0) for za, zt in zip(out_a.z_tasks, out_t.z_tasks)]
    labels = np.vstack([inp.s_aux_np, pseudo.labels])
    include = np.vstack([np.full(inp.s_aux_np.shape, source_adjust), pseudo.retained])
    assert include.shape[0] == n_a + pseudo.labels.shape[0]
    return z, labels, include


def prompt_loss(
    model: TaipanModel,
    inp: _Inputs,
    pseudo: PseudoLabelSet,
    bank: PrototypeBank,
    weights,
    temperature: float,
) -> dict[str, torch.Tensor]:
    """Total adaptation loss for a fixed prototype bank (used for gradient checks)."""
    out_a = model(inp.aux_gt, inp.xa)
    out_t = model(inp.target_gt, inp.xt)
    l_att, l_pseudo = confidence_tuning_loss(out_a.logits, inp.sa, inp.mask, out_t.logits, pseudo, weights)
    l_fil = filtered_entropy_loss(out_t.z_tasks, ~pseudo.retained, bank, temperature)
    return {"att": l_att, "pseudo": l_pseudo, "cnf": l_att + l_pseudo, "fil": l_fil, "prm": l_att + l_pseudo + l_fil}


def adapt(
    model: TaipanModel,
    aux_gt: GraphTensors,
    x_aux,
    s_aux,
    aux_train_mask,
    target_gt: GraphTensors,
    x_target,
    weights,
    cfg: AdaptationConfig,
) -> AdaptationResult:
    """Tune only the pretext tokens of a copy of ``model`` on the unlabelled target.

    Each step: forward both graphs, confidence-tuning loss, prototype
    recomputation from the current embeddings, EMA update, filtered-entropy
    loss, one Adam step on the tokens. Non-token parameters are untouched.
    """
    tuned = copy.deepcopy(model)
    tuned.eval()
    tuned.freeze_backbone(True)
    inp = _Inputs(aux_gt, x_aux, s_aux, aux_train_mask, target_gt, x_target)
    cards = tuned.cardinalities
    pseudo = pseudo_label(tuned, target_gt, inp.xt, cfg.threshold)
    result = AdaptationResult(tuned, [], pseudo, None)
    tokens = tuned.token_parameters()
    if cfg.steps == 0:
        return result
    if not tokens:
        logger.warning("model has no pretext tokens; adaptation leaves it unchanged")
        return result

    with torch.no_grad():
        out_a = tuned(aux_gt, inp.xa)
        out_t = tuned(target_gt, inp.xt)
    z, labels, include = _bank_sources(inp, out_a, out_t, pseudo, cfg.source_adjust)
    bank = init_prototypes(z, labels, include, cards, cfg.momentum)
    bank0 = bank.copy()

    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(tokens, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    last_good = [t.detach().clone() for t in tokens]
    for step in range(cfg.steps):
        opt.zero_grad()
        out_a = tuned(aux_gt, inp.xa)
        out_t = tuned(target_gt, inp.xt)
        l_att, l_pseudo = confidence_tuning_loss(out_a.logits, inp.sa, inp.mask, out_t.logits, pseudo, weights)
        z, labels, include = _bank_sources(inp, out_a, out_t, pseudo, cfg.source_adjust)
        current = PrototypeBank(*class_means(z, labels, include, cards), cfg.momentum)
        bank = ema_update(bank, current, cfg.momentum)
        l_fil = filtered_entropy_loss(out_t.z_tasks, ~pseudo.retained, bank, cfg.temperature)
        loss = l_att + l_pseudo + l_fil
        if not torch.isfinite(loss):
            logger.error("non-finite adaptation loss at step %d; keeping last finite tokens", step)
            with torch.no_grad():
                for t, good in zip(tokens, last_good):
                    t.copy_(good)
            result.aborted = True
            break
        loss.backward()
        opt.step()
        last_good = [t.detach().clone() for t in tokens]
        result.trajectory.append(
            {
                "step": step,
                "att": l_att.item(),
                "pseudo": l_pseudo.item(),
                "cnf": (l_att + l_pseudo).item(),
                "fil": l_fil.item(),
                "prm": loss.item(),
                "retained": pseudo.retained_counts,
                "prototype_drift": bank.distance(bank0),
            }
        )
        if cfg.relabel_each_step:
            pseudo = pseudo_label(tuned, target_gt, inp.xt, cfg.threshold)
    result.pseudo = pseudo
    result.bank = bank
    return result
