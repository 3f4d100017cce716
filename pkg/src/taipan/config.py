"""Experiment configuration: an INI file with one section per component.

Example::

    [experiment]
    scenario = same-distribution
    seeds = 0, 1, 2
    out = runs/demo
    methods = Rand, SingP, PreTr, Taipan

    [synthetic]
    node_count = 2000
    homophily_strength = 0.7
    inter_attribute_correlation = 1 0.6 0; 0.6 1 0; 0 0 1

    [train]
    epochs = 200
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import os
from dataclasses import dataclass, field

from taipan.encoders import GnnEncoderConfig
from taipan.graph import GraphSchema
from taipan.model import TrainConfig, config_hash
from taipan.synthetic import SyntheticSpec
from taipan.transfer import AdaptationConfig

SCENARIOS = ("same-distribution", "similar-distribution", "out-of-distribution")
METHODS = ("Rand", "SingP", "PreTr", "Taipan")

# name -> (hierarchy, tokens, gating, source_adjust)
ABLATIONS: dict[str, dict[str, bool]] = {
    "wo_hierarchy": {"hierarchy": False},
    "wo_pretexts": {"tokens": False},
    "wo_gating": {"gating": False},
    "wo_hierarchy_pretexts": {"hierarchy": False, "tokens": False},
    "wo_hierarchy_gating": {"hierarchy": False, "gating": False},
    "wo_pretexts_gating": {"tokens": False, "gating": False},
    "wo_all_pretraining": {"hierarchy": False, "tokens": False, "gating": False},
    "wo_source_adjust": {"source_adjust": False},
}


class ConfigError(ValueError):
    pass


@dataclass
class Variant:
    """Switches for the mechanisms the ablation study removes."""

    hierarchy: bool = True
    tokens: bool = True
    gating: bool = True
    source_adjust: bool = True

    @classmethod
    def named(cls, name: str) -> "Variant":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return cls(**ABLATIONS[name])


@dataclass
class ExperimentConfig:
    scenario: str = "same-distribution"
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs/experiment"
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    ablations: list[str] = field(default_factory=list)
    data: GraphSchema | None = None
    synthetic: SyntheticSpec | None = None
    aux_data: GraphSchema | None = None
    aux_synthetic: SyntheticSpec | None = None
    target_data: GraphSchema | None = None
    target_synthetic: SyntheticSpec | None = None
    defended_data: GraphSchema | None = None
    encoder: GnnEncoderConfig = field(default_factory=GnnEncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    singp_learning_rate: float = 0.005
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    grid_thresholds: list[float] = field(default_factory=list)
    grid_steps: list[int] = field(default_factory=list)
    link_threshold: float = 0.5
    flat_threshold: float = 0.05
    n_dcor: int = 2000
    target_labels: str = "zero"
    normalize_features: bool = True
    pca_dim: int | None = None
    eval_nodes: str = "test"
    victim: bool = False
    jobs: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        for a in self.ablations:
            Variant.named(a)
        if self.scenario == "same-distribution":
            if (self.data is None) == (self.synthetic is None):
                raise ConfigError("same-distribution needs exactly one of [data] or [synthetic]")
        else:
            if (self.aux_data is None) == (self.aux_synthetic is None):
                raise ConfigError("cross-graph scenarios need exactly one of [aux_data] / [aux_synthetic]")
            if (self.target_data is None) == (self.target_synthetic is None):
                raise ConfigError("cross-graph scenarios need exactly one of [target_data] / [target_synthetic]")
            if self.scenario == "out-of-distribution":
                same_file = (
                    self.aux_data is not None
                    and self.target_data is not None
                    and self.aux_data.node_table == self.target_data.node_table
                )
                if same_file:
                    raise ConfigError("out-of-distribution needs two distinct datasets")
        if self.target_labels not in ("zero", "use"):
            raise ConfigError("target_labels must be 'zero' or 'use'")
        if self.eval_nodes not in ("test", "all"):
            raise ConfigError("eval_nodes must be 'test' or 'all'")
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=str))

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out", None)
        d.pop("jobs", None)
        return config_hash(d)


def _list(v: str, cast=str) -> list:
    return [cast(t.strip()) for t in v.replace(";", ",").split(",") if t.strip()]


def _bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _coerce(dc_type, values: dict[str, str], section: str):
    fields = {f.name: f for f in dataclasses.fields(dc_type)}
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        default = fields[key].default
        if key == "inter_attribute_correlation":
            kwargs[key] = [[float(t) for t in row.split()] for row in raw.split(";") if row.strip()]
        elif key == "early_stop_patience":
            kwargs[key] = None if raw.strip().lower() in ("", "none") else int(raw)
        elif isinstance(default, bool):
            kwargs[key] = _bool(raw)
        elif isinstance(default, int):
            kwargs[key] = int(raw)
        elif isinstance(default, float):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw.strip()
    try:
        obj = dc_type(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def load_config(path: str, base_dir: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path!r}")
    base_dir = base_dir or os.path.dirname(os.path.abspath(path))
    cfg = ExperimentConfig()
    known = {
        "experiment", "data", "synthetic", "aux_data", "aux_synthetic", "target_data",
        "target_synthetic", "defended_data", "encoder", "train", "singp", "adapt", "grid", "profiler",
    }
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    if parser.has_section("experiment"):
        ex = dict(parser["experiment"])
        conv = {
            "scenario": str.strip,
            "seeds": lambda v: _list(v, int),
            "out": lambda v: v.strip() if os.path.isabs(v.strip()) else os.path.join(base_dir, v.strip()),
            "methods": _list,
            "ablations": _list,
            "n_dcor": int,
            "target_labels": str.strip,
            "normalize_features": _bool,
            "pca_dim": lambda v: None if v.strip().lower() in ("", "none") else int(v),
            "eval_nodes": str.strip,
            "victim": _bool,
            "jobs": int,
        }
        for k, v in ex.items():
            if k not in conv:
                raise ConfigError(f"[experiment] unknown key {k!r}")
            setattr(cfg, k, conv[k](v))
    for name in ("data", "aux_data", "target_data", "defended_data"):
        if parser.has_section(name):
            try:
                setattr(cfg, name, GraphSchema.from_mapping(dict(parser[name]), base_dir))
            except ValueError as exc:
                raise ConfigError(f"[{name}] {exc}") from None
    for name in ("synthetic", "aux_synthetic", "target_synthetic"):
        if parser.has_section(name):
            setattr(cfg, name, _coerce(SyntheticSpec, dict(parser[name]), name))
    if parser.has_section("encoder"):
        cfg.encoder = _coerce(GnnEncoderConfig, dict(parser["encoder"]), "encoder")
    if parser.has_section("train"):
        cfg.train = _coerce(TrainConfig, dict(parser["train"]), "train")
    if parser.has_section("adapt"):
        cfg.adapt = _coerce(AdaptationConfig, dict(parser["adapt"]), "adapt")
    if parser.has_section("singp"):
        for k, v in parser["singp"].items():
            if k != "learning_rate":
                raise ConfigError(f"[singp] unknown key {k!r}")
            cfg.singp_learning_rate = float(v)
    if parser.has_section("profiler"):
        for k, v in parser["profiler"].items():
            if k not in ("link_threshold", "flat_threshold"):
                raise ConfigError(f"[profiler] unknown key {k!r}")
            setattr(cfg, k, float(v))
    if parser.has_section("grid"):
        for k, v in parser["grid"].items():
            if k == "thresholds":
                cfg.grid_thresholds = _list(v, float)
            elif k == "steps":
                cfg.grid_steps = _list(v, int)
            else:
                raise ConfigError(f"[grid] unknown key {k!r}")
    return cfg.validate()
