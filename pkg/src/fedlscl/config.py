"""Experiment configuration: nested dataclasses with YAML round-tripping."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    lambda_E: float = 1.0
    lambda_W: float = 1.0
    server_lambda: float = 0.1
    stage1_epochs: int = 3
    stage2_epochs: int = 3
    batch_size: int = 16
    buffer_per_class: int = 20
    lr: float = 1e-3
    d_E: int = 64
    generator_std: float = 1e-3
    o2d_solver: str = "closed_form"

    def __post_init__(self):
        for name in ("lambda_E", "lambda_W", "server_lambda", "stage1_epochs", "stage2_epochs",
                     "buffer_per_class", "lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.d_E < 1:
            raise ConfigError("batch_size and d_E must be positive")
        if self.o2d_solver not in ("closed_form", "iterative"):
            raise ConfigError(f"unknown o2d_solver {self.o2d_solver!r}")


@dataclass(frozen=True)
class DataConfig:
    train_per_class: int = 40
    test_per_class: int = 20
    noise: float = 0.5
    num_parts: int = 16
    motifs_per_class: int = 3
    layout_prob: float = 0.8
    pretrain_classes: int = 32
    pretrain_per_class: int = 40
    pretrain_steps: int = 300
    backbone_seed: int = 0


@dataclass(frozen=True)
class Ablation:
    collab: bool = True
    smcf: bool = True
    o2d: bool = True


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 5
    num_tasks: int = 5
    classes_per_task: int = 8
    rounds_per_task: int = 5
    seeds: tuple[int, ...] = (42, 1999, 2024)
    num_public: int = 0
    dirichlet_beta: float = 0.5
    encoders: tuple[str, ...] = ("mlp",)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    hyper: HyperParams = field(default_factory=HyperParams)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if self.num_clients < 1 or self.num_tasks < 1 or self.classes_per_task < 1:
            raise ConfigError("num_clients, num_tasks and classes_per_task must be >= 1")
        if self.rounds_per_task < 1:
            raise ConfigError("rounds_per_task must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.encoders:
            raise ConfigError("encoders must list at least one architecture")
        if self.dirichlet_beta <= 0:
            raise ConfigError("dirichlet_beta must be positive")

    def encoder_for(self, client: int) -> str:
        return self.encoders[client % len(self.encoders)]

    def with_ablation(self, **flags) -> "FederationConfig":
        return dataclasses.replace(self, ablation=dataclasses.replace(self.ablation, **flags))

    def replace(self, **changes) -> "FederationConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["encoders"] = list(self.encoders)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "FederationConfig":
        d = dict(d)
        fed = d.pop("federation", {})
        d.update(fed)
        nested = {
            "backbone": BackboneConfig,
            "hyper": HyperParams,
            "hyperparams": HyperParams,
            "data": DataConfig,
            "ablation": Ablation,
            "ablations": Ablation,
        }
        kwargs = {}
        known = {f.name for f in dataclasses.fields(cls)}
        for key, value in d.items():
            if key in nested:
                target = {"hyperparams": "hyper", "ablations": "ablation"}.get(key, key)
                try:
                    kwargs[target] = nested[key](**(value or {}))
                except TypeError as exc:
                    raise ConfigError(f"bad [{key}] section: {exc}") from None
            elif key in known:
                kwargs[key] = tuple(value) if key in ("seeds", "encoders") else value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kwargs)


def load_config(path: str | Path) -> FederationConfig:
    with open(path) as fh:
        return FederationConfig.from_dict(yaml.safe_load(fh) or {})


def dump_config(cfg: FederationConfig, path: str | Path) -> None:
    d = cfg.to_dict()
    out = {
        "federation": {k: d[k] for k in ("num_clients", "num_tasks", "classes_per_task", "rounds_per_task",
                                         "seeds", "num_public", "dirichlet_beta", "encoders")},
        "backbone": d["backbone"],
        "hyperparams": d["hyper"],
        "data": d["data"],
        "ablations": d["ablation"],
    }
    with open(path, "w") as fh:
        yaml.safe_dump(out, fh, sort_keys=False)


def reference_config(**overrides) -> FederationConfig:
    """Desk-scale reference: 3 clients, 3 tasks of 2 classes."""
    base = FederationConfig(num_clients=3, num_tasks=3, classes_per_task=2)
    return dataclasses.replace(base, **overrides)
