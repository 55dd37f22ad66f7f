"""Run configuration: model, DSP and training settings in one JSON file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dsp import DSPConfig
from .model import ConfigError, ModelConfig
from .training import TrainHyper


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dsp: DSPConfig = field(default_factory=DSPConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    vote: str = "segment"

    def __post_init__(self):
        if self.model.f != self.dsp.n_mels or self.model.d != self.dsp.seg_len:
            raise ConfigError(
                f"model input ({self.model.f}x{self.model.d}) does not match DSP output "
                f"({self.dsp.n_mels}x{self.dsp.seg_len})"
            )
        if self.vote not in ("segment", "clip"):
            raise ConfigError(f"vote must be 'segment' or 'clip', got {self.vote!r}")
        if self.train.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.train.dtype!r}")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "dsp": self.dsp.to_dict(),
            "train": dataclasses.asdict(self.train),
            "vote": self.vote,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {"model", "dsp", "train", "vote"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        try:
            return cls(
                model=ModelConfig(**raw.get("model", {})),
                dsp=DSPConfig(**raw.get("dsp", {})),
                train=TrainHyper(**raw.get("train", {})),
                vote=raw.get("vote", "segment"),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(raw)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
