"""YAML configuration with strict schema validation.

Every controller / training / architecture hyperparameter is a named key whose
default is the published value; unknown keys are rejected with their path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

import yaml

from ..envgen import ObstacleParams, PassageParams
from ..posterior import TrainSchedule, default_b_ood, default_h_dim, default_samples_per_env


class ConfigError(ValueError):
    pass


def _from_mapping(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    hints = get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        hint = hints.get(name)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = _from_mapping(hint, value, f"{path}.{name}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from None


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "cluttered"
    n_envs: int = 100
    n_pairs: int = 100
    grid_size: int = 64
    extent: float = 4.0
    # training-time start-velocity spread; evaluation tasks always use the
    # task-distribution value (0.5)
    start_velocity_std: float = 0.5
    obstacles: ObstacleParams = field(default_factory=ObstacleParams)
    passages: PassageParams = field(default_factory=PassageParams)

    def __post_init__(self):
        if self.kind not in ("cluttered", "rooms"):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.n_envs < 1 or self.n_pairs < 1:
            raise ValueError("n_envs and n_pairs must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    h_dim: int | None = None  # None = published per-system value
    c_dim: int | None = None
    flow_depth: int = 10
    prior_depth: int = 4
    hidden: int = 128
    horizon: int = 40
    b_ood: float | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass(frozen=True)
class SuiteConfig:
    env_kind: str = "cluttered"
    n_tasks: int = 100
    budgets: tuple = (512,)
    controllers: tuple = ("mppi",)
    include_failures_in_cost: bool = True
    workers: int = 1
    max_steps: int = 100
    projection_ablation: bool = False
    save_trajectories: bool = False

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        object.__setattr__(self, "budgets", tuple(int(b) for b in self.budgets))
        object.__setattr__(self, "controllers", tuple(self.controllers))
        if any(b < 2 for b in self.budgets):
            raise ValueError("budgets must be >= 2")
        known = {"mppi", "icem", "flowmppi", "flowmppi_project"}
        bad = sorted(set(self.controllers) - known)
        if bad:
            raise ValueError(f"unknown controllers {bad}")


@dataclass(frozen=True)
class RootConfig:
    system: str = "planar"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    model: ModelConfig = field(default_factory=ModelConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    controllers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.system not in ("planar", "quadrotor"):
            raise ValueError(f"unknown system {self.system!r}")
        for name, overrides in self.controllers.items():
            if not isinstance(overrides, dict):
                raise ValueError(f"controllers.{name} must be a mapping")

    def resolved_model_kwargs(self) -> dict:
        import torch

        return dict(
            grid_size=self.dataset.grid_size,
            horizon=self.model.horizon,
            h_dim=self.model.h_dim or default_h_dim(self.system),
            c_dim=self.model.c_dim,
            flow_depth=self.model.flow_depth,
            prior_depth=self.model.prior_depth,
            hidden=self.model.hidden,
            b_ood=self.model.b_ood if self.model.b_ood is not None
            else default_b_ood(self.system),
            dtype=getattr(torch, self.model.dtype),
        )


def default_root_config(system: str = "planar") -> RootConfig:
    train = TrainSchedule(samples_per_env=default_samples_per_env(system))
    return RootConfig(system=system, train=train)


def load_config(path: Path | None, overrides: list[str] | None = None) -> RootConfig:
    """Parse a YAML config file, then apply dotted key=value overrides."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} conflicts with a scalar")
        node[parts[-1]] = yaml.safe_load(raw)
    return _from_mapping(RootConfig, data, "config")


def dump_config(config: RootConfig) -> str:
    def encode(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: encode(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [encode(v) for v in obj]
        if isinstance(obj, dict):
            return {k: encode(v) for k, v in obj.items()}
        return obj

    return yaml.safe_dump(encode(config), sort_keys=True)
