"""Run configuration: one JSON document with a section per subsystem.

The kinematics section is the single source of truth for vehicle
parameters; the library and environment sections receive it at build time
and never serialize their own copy, which keeps load -> serialize -> load
an exact round trip.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .envs import ScenarioConfig
from .intents import IntentTrainConfig, STYLES
from .kinematics import KinematicsConfig
from .primitives import LibraryConfig
from .search import SearchConfig
from .skills import SkillTrainConfig
from .trainer import PosteriorConfig, TrainConfig
from .world_model import ModelConfig


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; maps to exit code 2."""


@dataclass
class ArtifactPaths:
    library: str = "artifacts/library.jsonl"
    skills: str = "artifacts/skills.ckpt"
    intents: str = "artifacts/intents.ckpt"
    expert_data: list = field(default_factory=lambda: [
        f"artifacts/expert_{style}.jsonl" for style in STYLES])


@dataclass
class RunConfig:
    seed: int = 0
    kinematics: KinematicsConfig = field(default_factory=KinematicsConfig)
    library: LibraryConfig = field(default_factory=LibraryConfig)
    skills: SkillTrainConfig = field(default_factory=SkillTrainConfig)
    intents: IntentTrainConfig = field(default_factory=IntentTrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    posterior: PosteriorConfig = field(default_factory=PosteriorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    env: ScenarioConfig = field(default_factory=lambda: ScenarioConfig(
        scenario="corridor", density=0.2, step_cap=300))
    artifacts: ArtifactPaths = field(default_factory=ArtifactPaths)

    def __post_init__(self):
        # derived, never serialized: both consumers share one kinematics
        self.library.kin = self.kinematics
        self.env.kin = self.kinematics

    def validate(self):
        try:
            self.library.validate()
            self.env.validate()
            self.search.validate()
            self.posterior.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.skills.d_z < 1:
            raise ConfigError("skills.d_z must be >= 1")
        if self.skills.zeta < 0:
            raise ConfigError("skills.zeta must be >= 0")
        if self.intents.stride < 1:
            raise ConfigError("intents.stride must be >= 1")
        if self.posterior.expert_weights and \
                len(self.posterior.expert_weights) != len(self.intents.styles):
            raise ConfigError("posterior.expert_weights length must match intents.styles")
        return self


_SECTIONS = {
    "kinematics": KinematicsConfig,
    "library": LibraryConfig,
    "skills": SkillTrainConfig,
    "intents": IntentTrainConfig,
    "model": ModelConfig,
    "search": SearchConfig,
    "posterior": PosteriorConfig,
    "train": TrainConfig,
    "env": ScenarioConfig,
    "artifacts": ArtifactPaths,
}
_DERIVED_FIELDS = {"library": ("kin",), "env": ("kin",)}


def to_dict(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed}
    for name, _cls in _SECTIONS.items():
        section = dataclasses.asdict(getattr(cfg, name))
        for skip in _DERIVED_FIELDS.get(name, ()):
            section.pop(skip, None)
        out[name] = section
    return out


def from_dict(data: dict) -> RunConfig:
    known = set(_SECTIONS) | {"seed"}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config section {key!r}")
    kwargs = {"seed": data.get("seed", 0)}
    for name, cls in _SECTIONS.items():
        section = dict(data.get(name, {}))
        field_names = {f.name for f in dataclasses.fields(cls)}
        for key in section:
            if key not in field_names:
                raise ConfigError(f"unknown key {key!r} in config section {name!r}")
            if isinstance(section[key], dict):
                inner = {f.name: f.type for f in dataclasses.fields(cls)}
                # only RewardWeights nests this way
                from .envs import RewardWeights
                section[key] = RewardWeights(**section[key])
        for skip in _DERIVED_FIELDS.get(name, ()):
            section.pop(skip, None)
        try:
            kwargs[name] = cls(**section)
        except TypeError as exc:
            raise ConfigError(f"bad config section {name!r}: {exc}") from exc
    return RunConfig(**kwargs)


def save_config(cfg: RunConfig, path):
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    cfg = from_dict(data)
    cfg.validate()
    return cfg


def override_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Propagate one seed override into every section that owns one."""
    cfg.seed = seed
    cfg.library.seed = seed
    cfg.skills.seed = seed
    cfg.intents.seed = seed
    cfg.train.seed = seed
    cfg.env.seed = seed
    return cfg
