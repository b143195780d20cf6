"""Experiment configuration: strict JSON schema with named sub-sections.

Unknown keys are rejected with the offending key path so typos never pass
silently. ``epsilon: null`` means no noise (clipping only).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fedcast.vna import DpConfig


class ConfigError(ValueError):
    pass


@dataclass
class CsvSource:
    series: str
    locations: str


@dataclass
class DataSection:
    kind: str = "synthetic"
    window: int = 8
    horizon: int = 4
    # synthetic parameters
    n_active: int = 4
    n_passive: int = 6
    steps: int = 400
    coupling: float = 0.8
    features_active: int = 1
    features_passive: int = 1
    output_features: int = 1
    passive_rate_factor: int = 1
    # csv parameters
    active: Optional[CsvSource] = None
    passives: list[CsvSource] = field(default_factory=list)
    sampling_minutes: Optional[int] = None


@dataclass
class ModelSection:
    hidden: int = 32
    temporal_layers: int = 2
    spatial_layers: int = 2
    neighbors: int = 5
    heads: int = 2
    adaptive_rank: int = 10
    predict_from_fused: bool = True


@dataclass
class DpSection:
    epsilon: Optional[float] = None   # null -> no noise
    delta: float = 1e-4
    clip: float = 1.0
    train_noise: bool = True

    def to_dp_config(self) -> DpConfig:
        eps = math.inf if self.epsilon is None else float(self.epsilon)
        return DpConfig(epsilon=eps, delta=self.delta, clip=self.clip,
                        train_noise=self.train_noise)


@dataclass
class OptimizerSection:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 250
    patience: int = 25


@dataclass
class AttackSection:
    kind: str = "all"                # white-box | query-free | mean | random-guess | all
    level: int = 0
    lam: float = 1e-4
    beta: float = 2.0
    steps: int = 500
    lr: float = 0.1
    weight_decay: float = 1e-5
    targets: int = 16
    budget_epochs: int = 5
    distribution: str = "normal"


@dataclass
class ExperimentConfig:
    schema_version: int = 1
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    dp: DpSection = field(default_factory=DpSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    attack: AttackSection = field(default_factory=AttackSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# renamed JSON keys that would shadow Python builtins
_ALIASES = {"lambda": "lam"}


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = _ALIASES.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown config key {(path + '.' if path else '') + key!r}")
        ftype = fields[name].type
        here = f"{path}.{key}" if path else key
        if ftype == "DataSection":
            value = _build(DataSection, value, here)
        elif ftype == "ModelSection":
            value = _build(ModelSection, value, here)
        elif ftype == "DpSection":
            value = _build(DpSection, value, here)
        elif ftype == "OptimizerSection":
            value = _build(OptimizerSection, value, here)
        elif ftype == "AttackSection":
            value = _build(AttackSection, value, here)
        elif name == "active" and value is not None:
            value = _build(CsvSource, value, here)
        elif name == "passives" and value:
            value = [_build(CsvSource, v, f"{here}[{i}]") for i, v in enumerate(value)]
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "")
    if cfg.data.kind not in ("synthetic", "csv"):
        raise ConfigError(f"data.kind must be 'synthetic' or 'csv', got {cfg.data.kind!r}")
    if cfg.data.kind == "csv" and cfg.data.active is None:
        raise ConfigError("data.kind 'csv' requires data.active paths")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(raw)


def build_dataset_from_config(cfg: ExperimentConfig):
    from fedcast.data import build_dataset, generate_synthetic, load_csv

    d = cfg.data
    if d.kind == "synthetic":
        active, passive = generate_synthetic(
            cfg.seed, d.n_active, d.n_passive, d.steps, d.horizon, d.coupling,
            n_features_active=d.features_active,
            n_features_passive=d.features_passive,
            n_output_features=d.output_features,
            passive_rate_factor=d.passive_rate_factor,
        )
        passives = [passive]
    else:
        active = load_csv(d.active.series, d.active.locations, party_id="active",
                          role="active", sampling_minutes=d.sampling_minutes,
                          output_features=d.output_features)
        passives = [
            load_csv(src.series, src.locations, party_id=f"passive-{j}",
                     role="passive", sampling_minutes=d.sampling_minutes)
            for j, src in enumerate(d.passives)
        ]
    return build_dataset(active, passives, window=d.window, horizon=d.horizon)
