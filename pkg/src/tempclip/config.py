"""Run configuration: one JSON document with model/pretrain/train/data/eval sections.

Precedence is flag > file > default.  Every field has a default except the
top-level ``seed``, which seeds data generation, initialisation and training.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .data import DEFAULT_COUNTS, SyntheticVideoSpec
from .evaluation import DEFAULT_LAMBDA_GRID
from .experiments import PRETRAIN
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = ("model", "pretrain", "train", "data", "eval")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    noise: float = 0.05
    shape_size: int = 5
    brightness: tuple[float, float] = (0.6, 1.0)
    train_per_class: int = DEFAULT_COUNTS["train"]
    eval_per_class: int = DEFAULT_COUNTS["eval"]
    text_seed: int = 0

    def video_spec(self, model: ModelConfig) -> SyntheticVideoSpec:
        return SyntheticVideoSpec(frame_size=model.frame_size, frames_T=model.frames_T,
                                  shape_size=self.shape_size, noise=self.noise,
                                  brightness=tuple(self.brightness))

    @property
    def counts(self) -> dict:
        return {"train": self.train_per_class, "eval": self.eval_per_class}


@dataclass(frozen=True)
class EvalConfig:
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    ep1_repeats: int = 10
    recall_at: tuple[int, ...] = (1, 5)

    def __post_init__(self):
        if any(not 0.0 <= g <= 1.0 for g in self.lambda_grid):
            raise ConfigError("eval.lambda_grid values must lie in [0, 1]")
        if self.ep1_repeats < 1 or any(n < 1 for n in self.recall_at):
            raise ConfigError("eval.ep1_repeats and eval.recall_at must be >= 1")


def _section(cls, raw: Mapping, name: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {unknown}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    seed: int
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = PRETRAIN
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    explicit: frozenset = frozenset()   # "section.key" names set by file or flag

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RunConfig":
        if not isinstance(raw, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - set(SECTIONS) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown top-level keys: {unknown}")
        if "seed" not in raw:
            raise ConfigError("config needs a top-level 'seed'")
        seed = raw["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        for name in ("pretrain", "train"):
            if "seed" in raw.get(name, {}):
                raise ConfigError(f"set the seed at top level, not in [{name}]")
        defaults = cls(seed=seed)
        pre = {**defaults.pretrain.to_dict(), **raw.get("pretrain", {}), "seed": seed}
        trn = {**raw.get("train", {}), "seed": seed}
        cfg = cls(
            seed=seed,
            model=_section(ModelConfig, raw.get("model", {}), "model"),
            pretrain=_section(TrainConfig, pre, "pretrain"),
            train=_section(TrainConfig, trn, "train"),
            data=_section(DataConfig, raw.get("data", {}), "data"),
            eval=_section(EvalConfig, raw.get("eval", {}), "eval"),
            explicit=frozenset(f"{s}.{k}" for s in SECTIONS for k in raw.get(s, {})),
        )
        try:
            cfg.data.video_spec(cfg.model)  # surfaces impossible render settings early
        except ValueError as exc:
            raise ConfigError(f"[data]: {exc}") from exc
        return cfg

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "pretrain": {k: v for k, v in self.pretrain.to_dict().items() if k != "seed"},
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "data": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.data).items()},
            "eval": {"lambda_grid": list(self.eval.lambda_grid), "ep1_repeats": self.eval.ep1_repeats,
                     "recall_at": list(self.eval.recall_at)},
        }

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def parse_override(item: str) -> tuple[str, str, Any]:
    """``section.key=value`` with a JSON value (bare words are taken as strings)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    path, value = item.split("=", 1)
    if path == "seed":
        section, key = "", "seed"
    elif "." in path:
        section, key = path.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
    else:
        raise ConfigError(f"override {item!r} needs a section, e.g. train.epochs=3")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return section, key, parsed


def load_run_config(path=None, overrides=()) -> RunConfig:
    """File (optional) then ``section.key=value`` overrides, then validation."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    for item in overrides:
        section, key, value = parse_override(item)
        if section:
            raw.setdefault(section, {})[key] = value
        else:
            raw[key] = value
    return RunConfig.from_dict(raw)
