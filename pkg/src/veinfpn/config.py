"""Run configuration: one JSON document covering every stage of the pipeline."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FormatError, ParameterError
from .formats import config_hash
from .recognizer import RecognizerConfig
from .resfpn import ModelConfig
from .synth import SynthSpec
from .trainer import TrainConfig

CONFIG_ENV = "VEINFPN_CONFIG"


@dataclass
class ProtocolConfig:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    enroll_sessions: tuple[int, ...] = (1, 2)
    probe_sessions: tuple[int, ...] = (3, 4)
    client_ranges: dict[str, tuple[int, int]] | None = None
    # sessions whose train-split presentations carry masks used for training
    train_sessions: tuple[int, ...] = (1,)

    def __post_init__(self) -> None:
        self.fractions = tuple(float(f) for f in self.fractions)
        self.enroll_sessions = tuple(int(s) for s in self.enroll_sessions)
        self.probe_sessions = tuple(int(s) for s in self.probe_sessions)
        self.train_sessions = tuple(int(s) for s in self.train_sessions)
        if self.client_ranges is not None:
            self.client_ranges = {k: (int(v[0]), int(v[1])) for k, v in self.client_ranges.items()}

    def to_dict(self) -> dict:
        return {
            "fractions": list(self.fractions),
            "enroll_sessions": list(self.enroll_sessions),
            "probe_sessions": list(self.probe_sessions),
            "client_ranges": None if self.client_ranges is None else {k: list(v) for k, v in self.client_ranges.items()},
            "train_sessions": list(self.train_sessions),
        }


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    recognizer: RecognizerConfig = field(default_factory=RecognizerConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "recognizer": self.recognizer.to_dict(),
            "protocol": self.protocol.to_dict(),
            "synth": self.synth.to_dict(),
            "seed": self.seed,
        }

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {"model", "train", "recognizer", "protocol", "synth", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                model=ModelConfig(**d.get("model", {})),
                train=TrainConfig(**d.get("train", {})),
                recognizer=RecognizerConfig(**d.get("recognizer", {})),
                protocol=ProtocolConfig(**d.get("protocol", {})),
                synth=SynthSpec(**d.get("synth", {})),
                seed=int(d.get("seed", 0)),
            )
        except TypeError as exc:
            raise ParameterError(f"invalid config: {exc}") from exc


def load_config(path: str | Path | None = None) -> Config:
    """Read a config file; falls back to ``$VEINFPN_CONFIG``, then to defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is None:
        return Config()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"{path}: cannot read config ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})", exc.pos) from exc
    if not isinstance(data, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return Config.from_dict(data)
