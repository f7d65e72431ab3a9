"""Run configuration: model dimensions, variant switches and training settings."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .early_fusion import POOL_KINDS
from .errors import ConfigError, DimensionError
from .jca import COATTENTION_MODES, FusionStrategy
from .lstm import RESIDUAL_MODES


@dataclass
class RunConfig:
    N: int = 10
    d_a: int = 512
    d_v: int = 512
    k: int | None = None  # attention-map rows; defaults to N
    depth: int = 4
    fusion_strategy: str = "concatenation+fc"
    residual_embedding: str = "input"
    coattention_mode: str = "joint"
    early_fusion: str = "audio_guided"
    class_count: int = 29
    audio_dim: int = 128
    visual_positions: int = 49
    visual_channels: int = 512
    joint_hidden: int | None = None  # per direction; defaults to (d_a + d_v) / 2
    mlp_hidden: list[int] = field(default_factory=lambda: [1024, 256])
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    train_path: str | None = None
    val_path: str | None = None
    test_path: str | None = None
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.k is None:
            self.k = self.N
        if self.joint_hidden is None:
            self.joint_hidden = (self.d_a + self.d_v) // 2
        if isinstance(self.residual_embedding, bool):
            self.residual_embedding = "input" if self.residual_embedding else "off"
        self.mlp_hidden = [int(h) for h in self.mlp_hidden]

    @property
    def strategy(self) -> FusionStrategy:
        return FusionStrategy.parse(self.fusion_strategy)

    def validate(self) -> "RunConfig":
        extents = {
            "N": self.N, "d_a": self.d_a, "d_v": self.d_v, "k": self.k,
            "class_count": self.class_count, "audio_dim": self.audio_dim,
            "visual_positions": self.visual_positions, "visual_channels": self.visual_channels,
            "joint_hidden": self.joint_hidden, "batch_size": self.batch_size,
        }
        for name, value in extents.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if any(h < 1 for h in self.mlp_hidden):
            raise ConfigError(f"mlp_hidden entries must be positive, got {self.mlp_hidden}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.d_a % 2 or self.d_v % 2:
            raise ConfigError(f"d_a and d_v must be even (two LSTM directions), got {self.d_a}, {self.d_v}")
        if self.class_count > 255:
            raise ConfigError("class_count must fit a label byte (< 256)")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        try:
            strategy = self.strategy
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.coattention_mode not in COATTENTION_MODES:
            raise ConfigError(f"coattention_mode must be one of {COATTENTION_MODES}")
        if self.coattention_mode == "joint":
            try:
                strategy.joint_width(self.d_a, self.d_v)
            except DimensionError as exc:
                raise ConfigError(str(exc)) from exc
        if self.residual_embedding not in RESIDUAL_MODES:
            raise ConfigError(f"residual_embedding must be one of {RESIDUAL_MODES} or a boolean")
        if self.early_fusion not in POOL_KINDS:
            raise ConfigError(f"early_fusion must be one of {POOL_KINDS}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def load_config(path: str | os.PathLike | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a flat JSON config; ``overrides`` win over file values.

    When neither sets ``seed``, the ``AVE_SEED`` environment variable is used.
    """
    values: dict[str, Any] = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "seed" not in values and "AVE_SEED" in os.environ:
        try:
            values["seed"] = int(os.environ["AVE_SEED"])
        except ValueError as exc:
            raise ConfigError(f"AVE_SEED must be an integer, got {os.environ['AVE_SEED']!r}") from exc
    return RunConfig.from_dict(values).validate()


def write_config_echo(config: RunConfig, artifact: str | os.PathLike) -> Path:
    """Write ``<artifact>.config.json`` next to an output artifact."""
    path = Path(str(artifact) + ".config.json")
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
