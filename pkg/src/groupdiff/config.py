"""Versioned run configuration: one JSON document drives a whole run.

Parsing is strict: unknown keys anywhere in the tree are rejected (a
typo'd hyperparameter must never silently fall back to a default inside
an ablation grid), and parse(serialize(config)) reproduces the config
field for field.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .diffusion import GroupNoisePolicy, ScheduleConfig
from .errors import ValidationError
from .grouping import GroupSpec
from .model import ModelConfig
from .sampler import SamplerPlan
from .train import TrainConfig

CONFIG_VERSION = 1


@dataclass(frozen=True)
class Seeds:
    model_init: int = 0
    train: int = 1
    sample: int = 1000
    eval: int = 2000


@dataclass(frozen=True)
class Paths:
    dataset: str = ""
    index: str = ""
    out_dir: str = ""


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise ValidationError(f"{cls.__name__} section must be a mapping")
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    kv = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        if isinstance(v, list):
            v = tuple(v)
        kv[f.name] = v
    return cls(**kv)


@dataclass(frozen=True)
class RunConfig:
    mode: str = "groupdiff_l"
    version: int = CONFIG_VERSION
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    group: GroupSpec = field(default_factory=GroupSpec)
    noise: GroupNoisePolicy = field(default_factory=GroupNoisePolicy)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplerPlan = field(default_factory=SamplerPlan)
    paths: Paths = field(default_factory=Paths)
    seeds: Seeds = field(default_factory=Seeds)
    eval_images: int = 64
    probe_layer: int = 2

    def validate(self):
        if self.version != CONFIG_VERSION:
            raise ValidationError(f"unsupported config version {self.version}")
        if self.mode not in ("baseline", "groupdiff_f", "groupdiff_l"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        self.model.validate()
        self.schedule.validate()
        self.group.validate()
        self.noise.validate()
        self.train.validate()
        self.sampling.validate()
        if self.sampling.group_size > self.model.max_group and self.mode != "baseline":
            raise ValidationError("sampling group_size exceeds model max_group")
        if self.group.group_size > self.model.max_group:
            raise ValidationError("training group_size exceeds model max_group")
        if not 0 <= self.probe_layer < self.model.depth:
            raise ValidationError("probe_layer outside model depth")
        if self.eval_images < 1:
            raise ValidationError("eval_images must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampling"] = self.sampling.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValidationError("config root must be a mapping")
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown RunConfig keys: {sorted(extra)}")
        kv = dict(d)
        sections = {
            "model": ModelConfig,
            "schedule": ScheduleConfig,
            "group": GroupSpec,
            "noise": GroupNoisePolicy,
            "train": TrainConfig,
            "paths": Paths,
            "seeds": Seeds,
        }
        for name, section_cls in sections.items():
            if name in kv:
                kv[name] = _build(section_cls, kv[name])
        if "sampling" in kv:
            kv["sampling"] = SamplerPlan.from_dict(kv["sampling"])
        config = cls(**kv)
        config.validate()
        return config

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def load_config(path) -> RunConfig:
    with open(path) as f:
        return RunConfig.from_json(f.read())


def save_config(config: RunConfig, path) -> None:
    with open(path, "w") as f:
        f.write(config.to_json())
        f.write("\n")
