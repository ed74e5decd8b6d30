"""Experiment configuration: one JSON file drives every CLI command,
with individual fields overridable by flags."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

from .errors import ValidationError
from .training import TrainingConfig

MODEL_CHOICES = ("selfatt", "bigru")
LM_CHOICES = ("none", "bigram", "gru", "mlm")


@dataclass(frozen=True)
class ExperimentConfig:
    data_dir: str = ""
    model: str = "selfatt"
    encoding: str = "sync"
    lm: str = "none"
    lm_checkpoint: str = ""
    in_channels: int = 1
    heads: int = 2
    layers: int = 8
    d_f: int = 96
    bigru_hidden: int = 131
    bigru_layers: int = 1
    val_fraction: float = 0.15
    seed: int = 0
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if self.model not in MODEL_CHOICES:
            raise ValidationError(f"model must be one of {MODEL_CHOICES}, got {self.model!r}")
        if self.lm not in LM_CHOICES:
            raise ValidationError(f"lm must be one of {LM_CHOICES}, got {self.lm!r}")
        if self.in_channels not in (1, 2):
            raise ValidationError("in_channels must be 1 (music) or 2 (music + drum stem)")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValidationError("val_fraction must lie in [0, 1)")

    @property
    def d_ffn(self) -> int:
        return 4 * self.d_f

    def to_dict(self) -> dict:
        data = asdict(self)
        data["training"] = self.training.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "training" in data and isinstance(data["training"], dict):
            data["training"] = TrainingConfig.from_dict(data["training"])
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(data)
        except TypeError as exc:
            raise ValidationError(f"bad config {path}: {exc}") from exc

    def with_training(self, **kwargs) -> "ExperimentConfig":
        return replace(self, training=replace(self.training, **kwargs))
