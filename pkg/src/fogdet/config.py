"""Run configuration: one JSON document per run, every default echoed back
into the run report so no hidden state exists."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .detector import ConfigError, DetectorConfig, VARIANTS


def _default_presets() -> dict:
    return {"low": 0.04, "mid": 0.06, "high": 0.08}


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "baseline"
    data_root: str = "data"

    # dataset generation
    n_train: int = 60
    n_eval: int = 50
    image_size: int = 32
    max_objects: int = 3
    atmospheric_light: float = 0.9
    fog_presets: dict = field(default_factory=_default_presets)
    eval_splits: tuple = ("clear", "low", "mid", "high")

    # model
    token_dim: int = 64
    heads: int = 4
    num_queries: int = 10
    encoder_layers: int = 1
    w_cls: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    eos_coef: float = 0.2
    waa_squash: bool = True
    waa_axis: str = "key"
    fog_stream: str = "density"

    # training
    steps: int = 2000
    lr: float = 0.02
    momentum: float = 0.9
    max_grad_norm: float | None = 1.0
    batch_size: int = 4
    train_mix: str = "fog"            # "fog" | "mixed" (50/50 clear)
    fog_on_the_fly: bool = True       # re-fog clear images per step
    teacher_checkpoint: str | None = None
    teacher_steps: int = 2000
    perc_layers: tuple = (2, 3)
    perc_weights: tuple = (0.5, 1.0)
    perc_weight: float = 1.0
    checkpoint_every: int = 50

    # evaluation
    checkpoint: str | None = None
    min_confidence: float = 0.05

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.train_mix not in ("fog", "mixed"):
            raise ConfigError(f"train_mix must be 'fog' or 'mixed', got {self.train_mix!r}")
        self.eval_splits = tuple(self.eval_splits)
        self.perc_layers = tuple(self.perc_layers)
        self.perc_weights = tuple(self.perc_weights)

    def detector_config(self, variant: str | None = None) -> DetectorConfig:
        return DetectorConfig(
            variant=variant or self.variant,
            image_size=self.image_size,
            token_dim=self.token_dim,
            heads=self.heads,
            num_queries=self.num_queries,
            encoder_layers=self.encoder_layers,
            w_cls=self.w_cls, w_l1=self.w_l1, w_giou=self.w_giou,
            eos_coef=self.eos_coef,
            waa_squash=self.waa_squash, waa_axis=self.waa_axis,
            fog_stream=self.fog_stream,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
