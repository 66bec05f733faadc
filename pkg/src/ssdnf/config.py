"""Strict JSON run configuration: every section required, unknown keys rejected."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .sampler import SampleConfig
from .trainer import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_scenes: int = 16
    n_views: int = 16
    height: int = 32
    width: int = 32
    n_test_scenes: int = 4
    n_views_test: int = 24
    sparse_view_subset: int | None = None

    def validate(self) -> None:
        if min(self.n_scenes, self.n_views, self.height, self.width) < 1 or self.n_test_scenes < 0:
            raise ValueError("data sizes must be positive")
        if self.n_views_test < 17:
            raise ValueError("n_views_test must exceed 16 (views 0-15 are inputs, the rest held out)")
        if self.sparse_view_subset is not None and not 1 <= self.sparse_view_subset <= self.n_views:
            raise ValueError("sparse_view_subset must be in [1, n_views]")


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self) -> None:
        if self.T < 1 or not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need T >= 1 and 0 < beta_start <= beta_end < 1")


@dataclass
class EvalConfig:
    view_counts: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    # finetune budget per input-view count: [max_views, ft_outer, ft_inner, ft_lr]
    finetune: list = field(default_factory=lambda: [[1, 25, 4, 0.01], [2, 50, 4, 0.02], [4, 75, 4, 0.03],
                                                    [8, 100, 5, 0.04], [None, 120, 6, 0.05]])
    scenes: int | None = None

    def validate(self) -> None:
        if not self.view_counts or min(self.view_counts) < 1 or max(self.view_counts) > 16:
            raise ValueError("view_counts must lie in [1, 16]")
        if not self.finetune or self.finetune[-1][0] is not None:
            raise ValueError("eval.finetune must end with an open-ended [null, ...] entry")

    def budget(self, n_views: int) -> tuple:
        for limit, outer, inner, lr in self.finetune:
            if limit is None or n_views <= limit:
                return int(outer), int(inner), float(lr)
        raise AssertionError("unreachable")


SECTIONS = {"data": DataConfig, "model": ModelConfig, "schedule": ScheduleConfig,
            "train": TrainConfig, "sample": SampleConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    deterministic: bool = True

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except ValueError as e:
                raise ConfigError(f"{name}: {e}") from None
        px = self.data.height * self.data.width
        if self.sample.ray_batch > px * 16:
            raise ConfigError("sample.ray_batch exceeds the rays of 16 views")
        return self

    def to_json(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        d["model"]["unet_mults"] = list(self.model.unet_mults)
        d["seed"], d["deterministic"] = self.seed, self.deterministic
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    kw = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{name}.{key} must be a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number")
            if isinstance(default, int) and isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{name}.{key} must be an integer")
            value = type(default)(value)
        if isinstance(default, tuple):
            value = tuple(value)
        kw[key] = value
    return cls(**kw)


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    allowed = set(SECTIONS) | {"seed", "deterministic"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    missing = sorted(allowed - set(doc))
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    if isinstance(doc["seed"], bool) or not isinstance(doc["seed"], int):
        raise ConfigError("seed must be an integer")
    if not isinstance(doc["deterministic"], bool):
        raise ConfigError("deterministic must be a boolean")
    cfg = RunConfig(**{name: _section(name, cls, doc[name]) for name, cls in SECTIONS.items()},
                    seed=doc["seed"], deterministic=doc["deterministic"])
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_config(doc)
