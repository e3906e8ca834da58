"""Run configuration: one JSON document covering every tunable of a run.

Values not given in a file fall back to the chosen preset; unknown keys are
rejected so typos fail loudly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .dsp import StftConfig
from .errors import UsageError
from .seq import TcnConfig
from .simul import DenseUNetConfig
from .trainer import TrainConfig

PRESETS = ("paper", "desk")


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    n_train: int = 500
    n_valid: int = 50
    n_test: int = 50
    n_speakers: int = 20
    n_test_speakers: int = 8
    duration: float = 2.0

    @property
    def manifest(self) -> Path:
        return Path(self.root) / "manifest.jsonl"


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    crop_samples: int | None = 8000  # random training windows; None trains on whole utterances
    stft: StftConfig = field(default_factory=StftConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: DenseUNetConfig = field(default_factory=lambda: DenseUNetConfig.preset("desk"))
    tcn: TcnConfig = field(default_factory=lambda: TcnConfig.preset("desk"))
    train_simul: TrainConfig = field(default_factory=TrainConfig)
    train_seq: TrainConfig = field(default_factory=TrainConfig)
    train_joint: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def for_preset(cls, preset: str = "desk") -> "RunConfig":
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {PRESETS}")
        if preset == "paper":
            return cls(
                preset="paper", crop_samples=None,
                data=DataConfig(n_train=20000, n_valid=5000, n_test=3000, n_speakers=101,
                                n_test_speakers=18, duration=4.0),
                model=DenseUNetConfig.preset("paper"), tcn=TcnConfig.preset("paper"),
                train_simul=TrainConfig(initial_lr=1e-4, max_epochs=100),
                train_seq=TrainConfig(initial_lr=2.5e-4, max_epochs=100),
                train_joint=TrainConfig(initial_lr=1e-4, max_epochs=40),
            )
        return cls(
            train_simul=TrainConfig(initial_lr=1e-3, max_steps=2000, eval_every=250),
            train_seq=TrainConfig(initial_lr=1e-3, max_steps=1500, eval_every=250),
            train_joint=TrainConfig(initial_lr=1e-3, max_steps=200, eval_every=50),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict, preset: str | None = None) -> "RunConfig":
        base = cls.for_preset(preset or data.get("preset", "desk"))
        return _merge(base, data, "")

    @classmethod
    def load(cls, path, preset: str | None = None) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise UsageError(f"{path}: top level must be an object")
        return cls.from_dict(data, preset)


def _merge(obj, data: dict, where: str):
    known = {f.name: f for f in fields(obj)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise UsageError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    changes = {}
    for key, value in data.items():
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise UsageError(f"{where}{key} must be an object")
            changes[key] = _merge(current, value, f"{where}{key}.")
        else:
            changes[key] = value
    return replace(obj, **changes)
