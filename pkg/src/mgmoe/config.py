"""Run configuration: nested dataclasses loaded from / dumped to JSON."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .cluster import KMeansConfig
from .experts import ExpertConfig
from .router import RouterConfig


@dataclass
class RunConfig:
    clean_dir: str = "data/clean"
    corpus_dir: str = "data/corpus"
    models_dir: str = "data/models"
    reports_dir: str = "data/reports"
    seed: int = 0
    crop_size: int = 64
    crops_per_clean: int = 8
    # number of clean images per split, taken in sorted filename order
    clean_splits: dict = field(default_factory=lambda: {"train": 100, "val": 8, "test": 25})
    recipes: list = field(default_factory=lambda: ["N", "B", "R", "H"])
    enable_jpeg: bool = False
    # standardized DR components are clipped to +-dr_clip (None: no clipping)
    dr_clip: float | None = 5.0
    level_counts: list = field(default_factory=lambda: [1, 4, 8])
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    sweep_fineness: list = field(default_factory=lambda: [[1], [1, 2], [1, 4], [1, 8]])
    sweep_granularity: list = field(default_factory=lambda: [[1], [1, 8], [1, 4, 8]])

    def validate(self) -> "RunConfig":
        if self.crop_size < 32 or self.crops_per_clean < 1:
            raise ValueError("crop_size must be >= 32 and crops_per_clean >= 1")
        if self.router.alpha < 0 or self.router.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        for name in ("steps", "lr", "batch"):
            if getattr(self.router, name) <= 0 or getattr(self.expert, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dr_clip is not None and self.dr_clip <= 0:
            raise ValueError("dr_clip must be positive or null")
        if "train" not in self.clean_splits or "test" not in self.clean_splits:
            raise ValueError("clean_splits needs train and test entries")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data: dict):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        t = hints.get(k)
        if dataclasses.is_dataclass(t) and isinstance(v, dict):
            v = _build(t, v)
        kwargs[k] = v
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data).validate()


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    with open(path) as fh:
        return config_from_dict(json.load(fh))
