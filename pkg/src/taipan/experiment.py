"""End-to-end orchestration: data, profiling, pre-training, adaptation, evaluation.

Artifacts for seed ``k`` live under ``<out>/seed_<k>/``; ``<out>/bundle.json``
indexes every (seed, method) cell with its status.
"""
from __future__ import annotations

import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from taipan.audit import fairness_metrics, sensitive_correlation_audit, vulnerability_profile
from taipan.baselines import class_priors, run_baseline_random, run_baseline_single
from taipan.config import ExperimentConfig, Variant
from taipan.encoders import GraphTensors
from taipan.graph import (
    AttributedGraph,
    augment_features_with_labels,
    load_graph,
    pca_align,
    split_train_val_test,
    split_victim_auxiliary,
)
from taipan.metrics import MetricsReport, evaluate_attack
from taipan.model import (
    TaipanModel,
    TrainConfig,
    load_checkpoint,
    predict_with_confidence,
    pretrain,
    save_checkpoint,
)
from taipan.profiler import AttackHierarchy, build_attack_hierarchy, cosine_similarity_matrix, task_weights
from taipan.synthetic import generate_synthetic
from taipan.transfer import adapt
from taipan.victim import train_node_classifier

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1


class MissingArtifact(FileNotFoundError):
    pass


def _write_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def normalize_columns(x: np.ndarray) -> np.ndarray:
    """Min-max scale every column to [-1, 1]; constant columns become 0."""
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    out = 2.0 * (x - lo) / span - 1.0
    out[:, hi <= lo] = 0.0
    return out


def _spearman(table) -> dict:
    out = {}
    for col in ("degree", "homophily"):
        a, b = table[col], table["node_accuracy"]
        if a.nunique() < 2 or b.nunique() < 2:
            out[f"spearman_{col}"] = float("nan")
        else:
            out[f"spearman_{col}"] = float(a.corr(b, method="spearman"))
    return out


@dataclass
class PreparedData:
    aux: AttributedGraph
    target: AttributedGraph
    x_aux: np.ndarray
    x_target: np.ndarray
    notes: list[str] = field(default_factory=list)

    @property
    def eval_mask(self) -> np.ndarray:
        return self.target.test_mask


def _graph_from(schema, spec, seed: int) -> AttributedGraph:
    if schema is not None:
        return load_graph(schema)
    return generate_synthetic(replace(spec, seed=spec.seed + seed))


def _restrict_attributes(g: AttributedGraph, names: list[str]) -> AttributedGraph:
    idx = [g.sensitive_names.index(n) for n in names]
    return g.replace(
        sensitive=g.sensitive[:, idx],
        sensitive_cardinalities=tuple(g.sensitive_cardinalities[i] for i in idx),
        sensitive_names=tuple(names),
    )


def prepare_data(cfg: ExperimentConfig, seed: int) -> PreparedData:
    notes = []
    if cfg.scenario == "same-distribution":
        g = _graph_from(cfg.data, cfg.synthetic, seed)
        target, aux = split_victim_auxiliary(g, seed)
    else:
        aux = _graph_from(cfg.aux_data, cfg.aux_synthetic, seed)
        target = _graph_from(cfg.target_data, cfg.target_synthetic, seed)
        if aux.sensitive_names != target.sensitive_names:
            common = [n for n in aux.sensitive_names if n in target.sensitive_names]
            if not common:
                raise ValueError("auxiliary and target graphs share no sensitive attribute")
            dropped = sorted(set(aux.sensitive_names) ^ set(target.sensitive_names))
            notes.append(f"attacking shared attributes {common}; not attacked: {dropped}")
            aux, target = _restrict_attributes(aux, common), _restrict_attributes(target, common)
        if list(aux.sensitive_cardinalities) != list(target.sensitive_cardinalities):
            raise ValueError("shared attributes have different cardinalities across graphs")
    aux = split_train_val_test(aux, seed=seed)
    target = split_train_val_test(target, seed=seed + 1)

    if cfg.normalize_features:
        aux = aux.replace(features=normalize_columns(aux.features))
        target = target.replace(features=normalize_columns(target.features))
    width = aux.label_classes if aux.labels is not None else 0
    x_aux = augment_features_with_labels(aux, width)
    if cfg.target_labels == "use" and target.labels is not None:
        x_target = augment_features_with_labels(target, width)
    else:
        x_target = augment_features_with_labels(target.replace(labels=None), width)
    if x_aux.shape[1] != x_target.shape[1] or cfg.pca_dim:
        k = cfg.pca_dim or min(x_aux.shape[1], x_target.shape[1])
        x_aux, x_target = pca_align(x_aux, x_target, k)
        notes.append(f"features projected to {k} principal components per graph")
    return PreparedData(aux, target, x_aux, x_target, notes)


@dataclass
class Profile:
    similarity: np.ndarray
    hierarchy: AttackHierarchy
    weights: np.ndarray

    def to_dict(self) -> dict:
        return {"hierarchy": self.hierarchy.to_dict(), "weights": self.weights.tolist()}


def profile_tasks(cfg: ExperimentConfig, data: PreparedData) -> Profile:
    aux = data.aux
    sim = cosine_similarity_matrix(aux.sensitive, aux.sensitive_cardinalities)
    hierarchy = build_attack_hierarchy(sim, cfg.link_threshold, cfg.flat_threshold)
    w = task_weights(aux.sensitive, data.x_aux, aux.sensitive_cardinalities, cfg.n_dcor, seed=0)
    return Profile(sim, hierarchy, w)


class SeedRun:
    """All pipeline stages for one seed, sharing prepared data and graph operators."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.dir = os.path.join(cfg.out, f"seed_{seed}")
        self.stamp = {"config_hash": cfg.hash(), "seed": seed}
        self.data = prepare_data(cfg, seed)
        self.gt_aux = GraphTensors.from_graph(self.data.aux)
        self.gt_target = GraphTensors.from_graph(self.data.target)
        self._profile: Profile | None = None

    # paths ----------------------------------------------------------------
    def path(self, *parts) -> str:
        return os.path.join(self.dir, *parts)

    def ckpt(self, variant_name: str, stage: str) -> str:
        return self.path("checkpoints", variant_name, stage)

    # stages ---------------------------------------------------------------
    def profile(self) -> Profile:
        if self._profile is None:
            self._profile = profile_tasks(self.cfg, self.data)
            _write_json(
                self.path("profile.json"),
                {**self.stamp, **self._profile.to_dict(), "notes": self.data.notes},
            )
        return self._profile

    def build_model(self, variant: Variant) -> TaipanModel:
        prof = self.profile()
        hierarchy = prof.hierarchy if variant.hierarchy else AttackHierarchy.flat(
            self.data.aux.num_sensitive, prof.similarity
        )
        torch.manual_seed(self.cfg.train.seed + self.seed)
        return TaipanModel(
            self.data.x_aux.shape[1],
            self.data.aux.sensitive_cardinalities,
            hierarchy,
            self.cfg.encoder,
            use_tokens=variant.tokens,
            use_gating=variant.gating,
        )

    def pretrain(self, variant: Variant | None = None, name: str = "full") -> TaipanModel:
        variant = variant or Variant()
        model = self.build_model(variant)
        aux = self.data.aux
        cfg = replace(self.cfg.train, seed=self.cfg.train.seed + self.seed)
        hist = pretrain(
            model, self.gt_aux, self.data.x_aux, aux.sensitive, self.profile().weights,
            aux.train_mask, aux.val_mask, cfg,
        )
        save_checkpoint(
            model, self.ckpt(name, "pretrained"),
            {**self.stamp, "variant": vars(variant), "best_epoch": hist.best_epoch, "best_val_auc": hist.best_score},
        )
        _write_json(self.path("checkpoints", name, "pretrain_history.json"), {**self.stamp, "records": hist.records})
        return model

    def load(self, name: str, stage: str) -> TaipanModel:
        d = self.ckpt(name, stage)
        if not os.path.exists(os.path.join(d, "manifest.json")):
            raise MissingArtifact(f"no {stage} checkpoint at {d}; run the earlier stage first")
        return load_checkpoint(d)[0]

    def adapt(self, model: TaipanModel, name: str = "full", source_adjust: bool = True, **overrides) -> TaipanModel:
        aux = self.data.aux
        acfg = replace(self.cfg.adapt, seed=self.cfg.adapt.seed + self.seed, source_adjust=source_adjust, **overrides)
        res = adapt(
            model, self.gt_aux, self.data.x_aux, aux.sensitive, aux.train_mask,
            self.gt_target, self.data.x_target, self.profile().weights, acfg,
        )
        stage = "adapted" if not overrides else "adapted_" + "_".join(f"{k}{v}" for k, v in sorted(overrides.items()))
        save_checkpoint(res.model, self.ckpt(name, stage), {**self.stamp, "adaptation": vars(acfg)})
        _write_json(
            self.path("checkpoints", name, f"{stage}_trajectory.json"),
            {**self.stamp, "aborted": res.aborted, "trajectory": res.trajectory,
             "retained": res.pseudo.retained_counts if res.pseudo else None},
        )
        return res.model

    # evaluation -------------------------------------------------------------
    def _eval_idx(self) -> np.ndarray:
        t = self.data.target
        return np.flatnonzero(t.test_mask) if self.cfg.eval_nodes == "test" else np.arange(t.node_count)

    def evaluate_probs(self, method: str, probs: list[np.ndarray], per_node: bool = False) -> MetricsReport:
        t = self.data.target
        idx = self._eval_idx()
        cards = t.sensitive_cardinalities
        rep = evaluate_attack([p[idx] for p in probs], t.sensitive[idx], t.features[idx], cards, self.cfg.n_dcor)
        other = np.arange(t.node_count) if self.cfg.eval_nodes == "test" else np.flatnonzero(t.test_mask)
        alt = evaluate_attack([p[other] for p in probs], t.sensitive[other], t.features[other], cards, self.cfg.n_dcor)
        rep.extra = {
            "eval_nodes": self.cfg.eval_nodes,
            "n_eval": int(len(idx)),
            ("all_nodes" if self.cfg.eval_nodes == "test" else "test_nodes"): alt.metrics(),
            **self.stamp,
            "method": method,
        }
        out = self.path("methods", method)
        _write_json(os.path.join(out, "metrics.json"), rep.to_dict())
        if per_node:
            s_pred = np.stack([np.argmax(p, axis=1) for p in probs], axis=1)
            table, _ = vulnerability_profile(t, s_pred, t.sensitive)
            table["joint_confidence"] = np.prod(np.stack([p.max(axis=1) for p in probs], axis=1), axis=1)
            table = table.iloc[idx]
            rep.extra["vulnerability"] = _spearman(table)
            table.to_csv(os.path.join(out, "per_node.csv"), index=False, float_format="%.10g")
            _write_json(os.path.join(out, "metrics.json"), rep.to_dict())
        return rep

    def model_probs(self, model: TaipanModel) -> list[np.ndarray]:
        return [p.probs for p in predict_with_confidence(model, self.gt_target, self.data.x_target)]

    def run_rand(self) -> MetricsReport:
        aux = self.data.aux
        priors = class_priors(aux.sensitive, aux.sensitive_cardinalities)
        return self.evaluate_probs("Rand", run_baseline_random(self.data.target.node_count, priors, self.seed))

    def run_singp(self) -> MetricsReport:
        aux = self.data.aux
        cfg = replace(self.cfg.train, learning_rate=self.cfg.singp_learning_rate, seed=self.cfg.train.seed + self.seed)
        probs, _, _ = run_baseline_single(
            self.gt_aux, self.data.x_aux, aux.sensitive, aux.sensitive_cardinalities,
            aux.train_mask, aux.val_mask, self.gt_target, self.data.x_target, self.cfg.encoder, cfg,
        )
        return self.evaluate_probs("SingP", probs)

    def audit(self) -> dict:
        t = self.data.target
        result: dict = {**self.stamp, "ODC": sensitive_correlation_audit(t, seed=self.seed, max_nodes=self.cfg.n_dcor)}
        if self.cfg.defended_data is not None:
            result["DDC"] = sensitive_correlation_audit(
                load_graph(self.cfg.defended_data), seed=self.seed, max_nodes=self.cfg.n_dcor
            )
        if self.cfg.victim and t.labels is not None:
            cfg = replace(self.cfg.train, seed=self.cfg.train.seed + self.seed)
            clf, util, _ = train_node_classifier(self.cfg.encoder, t, cfg)
            clf.eval()
            with torch.no_grad():
                logits = clf(self.gt_target, torch.as_tensor(t.features, dtype=torch.float64))
            pred = logits.argmax(dim=1).numpy()
            te = t.test_mask
            result["victim_utility"] = util
            result["fairness"] = fairness_metrics(pred[te], t.sensitive[te], t.labels[te])
        _write_json(self.path("audit.json"), result)
        return result


def run_seed(cfg: ExperimentConfig, seed: int, reuse: bool = False) -> list[dict]:
    """Run every configured method for one seed; failures are recorded per cell.

    With ``reuse`` the pre-trained and adapted checkpoints written by earlier
    stages are loaded instead of retrained.
    """
    run = SeedRun(cfg, seed)
    cells: list[dict] = []

    def cell(method, fn):
        rec = {"seed": seed, "method": method}
        try:
            rep = fn()
            rec.update(status="ok", metrics=rep.metrics(), path=os.path.relpath(run.path("methods", method), cfg.out))
        except Exception as exc:  # a failed cell must not lose the others
            logger.error("cell seed=%s method=%s failed: %s", seed, method, exc)
            rec.update(status="failed", error=f"{type(exc).__name__}: {exc}", trace=traceback.format_exc(limit=3))
        cells.append(rec)

    run.profile()
    pre = adapted = None
    if reuse:
        pre = run.load("full", "pretrained")
        if "Taipan" in cfg.methods:
            adapted = run.load("full", "adapted")
    elif "PreTr" in cfg.methods or "Taipan" in cfg.methods or cfg.grid_thresholds or cfg.ablations:
        pre = run.pretrain()
    if "Rand" in cfg.methods:
        cell("Rand", run.run_rand)
    if "SingP" in cfg.methods:
        cell("SingP", run.run_singp)
    if "PreTr" in cfg.methods:
        cell("PreTr", lambda: run.evaluate_probs("PreTr", run.model_probs(pre), per_node=True))
    if "Taipan" in cfg.methods:
        cell("Taipan", lambda: run.evaluate_probs("Taipan", run.model_probs(adapted if adapted is not None else run.adapt(pre)), per_node=True))
    for gamma in cfg.grid_thresholds or []:
        for steps in cfg.grid_steps or [cfg.adapt.steps]:
            name = f"Taipan[threshold={gamma},steps={steps}]"
            cell(name, lambda g=gamma, k=steps, name=name: run.evaluate_probs(
                name, run.model_probs(run.adapt(pre, threshold=g, steps=k))))
    for ab in cfg.ablations:
        variant = Variant.named(ab)

        def ablate(ab=ab, variant=variant):
            if variant.hierarchy and variant.tokens and variant.gating:
                base = pre
            else:
                base = run.pretrain(variant, name=ab)
            return run.evaluate_probs(f"Taipan-{ab}", run.model_probs(run.adapt(base, name=ab, source_adjust=variant.source_adjust)))

        cell(f"Taipan-{ab}", ablate)
    try:
        run.audit()
    except Exception as exc:
        logger.error("audit for seed %s failed: %s", seed, exc)
        cells.append({"seed": seed, "method": "audit", "status": "failed", "error": str(exc)})
    return cells


def write_bundle(cfg: ExperimentConfig, cells: list[dict]) -> dict:
    bundle = {
        "version": BUNDLE_VERSION,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "cells": cells,
        "complete": all(c["status"] == "ok" for c in cells),
    }
    _write_json(os.path.join(cfg.out, "bundle.json"), bundle)
    return bundle


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Full pipeline over every seed; writes ``bundle.json`` and returns it."""
    cfg.validate()
    os.makedirs(cfg.out, exist_ok=True)
    cells: list[dict] = []
    if cfg.jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(run_seed, cfg, s) for s in cfg.seeds]
            for s, f in zip(cfg.seeds, futures):
                try:
                    cells.extend(f.result())
                except Exception as exc:
                    cells.append({"seed": s, "method": "*", "status": "failed", "error": str(exc)})
    else:
        for s in cfg.seeds:
            try:
                cells.extend(run_seed(cfg, s))
            except Exception as exc:
                logger.error("seed %s failed before any method ran: %s", s, exc)
                cells.append({"seed": s, "method": "*", "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
    return write_bundle(cfg, cells)


def load_bundle(out: str) -> dict:
    path = os.path.join(out, "bundle.json")
    if not os.path.exists(path):
        raise MissingArtifact(f"no bundle at {path}")
    with open(path) as fh:
        return json.load(fh)
