"""Command line entry point: ``taipan <stage> --config exp.ini``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from taipan.config import SCENARIOS, ConfigError, ExperimentConfig, load_config
from taipan.encoders import VARIANTS
from taipan.experiment import MissingArtifact, SeedRun, run_experiment, run_seed, write_bundle
from taipan.graph import GraphValidationError, SchemaError
from taipan.model import TrainingDivergence
from taipan.report import EmptyBundle, emit_report

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_MISSING = 5
EXIT_INCOMPLETE = 6

logger = logging.getLogger("taipan")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI experiment file")
    common.add_argument("--seed", type=int, action="append", help="run only this seed (repeatable)")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--scenario", choices=SCENARIOS)
    common.add_argument("--encoder", choices=VARIANTS, help="override the GNN backbone")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="taipan", description="Multi-attribute inference attack toolkit for graphs.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("profile", "cluster attack tasks and write profile.json"),
        ("pretrain", "pre-train the multi-task attack model on the auxiliary graph"),
        ("adapt", "tune pretext tokens on the target graph from a pre-trained checkpoint"),
        ("evaluate", "evaluate every configured method on the target test split"),
        ("audit", "model-free leakage audit (and victim fairness when enabled)"),
        ("run", "full pipeline over all seeds"),
    ]:
        sub.add_parser(name, parents=[common], help=help_)
    rp = sub.add_parser("report", help="render report.md and figures from a bundle")
    rp.add_argument("--config", help="INI file whose output directory holds the bundle")
    rp.add_argument("--out", help="bundle directory (takes precedence over --config)")
    rp.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed:
        cfg.seeds = list(args.seed)
    if args.out:
        cfg.out = args.out
    if args.scenario:
        cfg.scenario = args.scenario
    if args.encoder:
        cfg.encoder = dataclasses.replace(cfg.encoder, variant=args.encoder)
    return cfg.validate()


def _stage(cfg: ExperimentConfig, command: str) -> int:
    if command == "run":
        bundle = run_experiment(cfg)
        print(json.dumps({"out": cfg.out, "complete": bundle["complete"], "cells": len(bundle["cells"])}))
        return EXIT_OK if bundle["complete"] else EXIT_INCOMPLETE
    if command == "evaluate":
        cells = [c for s in cfg.seeds for c in run_seed(cfg, s, reuse=True)]
        bundle = write_bundle(cfg, cells)
        print(json.dumps({"out": cfg.out, "complete": bundle["complete"], "cells": len(cells)}))
        return EXIT_OK if bundle["complete"] else EXIT_INCOMPLETE
    for seed in cfg.seeds:
        run = SeedRun(cfg, seed)
        if command == "profile":
            prof = run.profile()
            print(json.dumps({"seed": seed, "clusters": prof.hierarchy.clusters, "weights": prof.weights.tolist()}))
        elif command == "pretrain":
            run.pretrain()
            print(json.dumps({"seed": seed, "checkpoint": run.ckpt("full", "pretrained")}))
        elif command == "adapt":
            run.adapt(run.load("full", "pretrained"))
            print(json.dumps({"seed": seed, "checkpoint": run.ckpt("full", "adapted")}))
        elif command == "audit":
            res = run.audit()
            print(json.dumps({k: v for k, v in res.items() if k in ("seed", "ODC", "DDC")}))
    return EXIT_OK


def _categorise(exc: Exception) -> tuple[str, int]:
    if isinstance(exc, ConfigError):
        return "config", EXIT_CONFIG
    if isinstance(exc, (MissingArtifact, EmptyBundle)):
        return "missing-artifact", EXIT_MISSING
    if isinstance(exc, (SchemaError, GraphValidationError, FileNotFoundError)):
        return "data", EXIT_DATA
    if isinstance(exc, TrainingDivergence):
        return "divergence", EXIT_DIVERGED
    return "error", EXIT_OTHER


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            if args.out:
                out = args.out
            elif args.config:
                out = load_config(args.config).out
            else:
                raise ConfigError("report needs --out or --config")
            print(emit_report(out))
            return EXIT_OK
        return _stage(_resolve(args), args.command)
    except Exception as exc:
        category, code = _categorise(exc)
        if code == EXIT_OTHER:
            logger.debug("unexpected failure", exc_info=True)
        message = str(exc)
    print(f"taipan: {category} error: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
