"""Run configuration."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .geometry import SegmentFrame
from .map_model import DEFAULT_RULE_KEYS, Pose
from .models import NoiseSpec

ADAPTER_ENV = "RULEMAP_ADAPTER_CMD"
BACKENDS = ("oracle", "noisy", "adapter")


@dataclass(frozen=True)
class RunConfig:
    width_bins: int = 224
    height_bins: int = 224
    bin_size: float = 0.1
    overlap_ratio: float = 0.10
    images_per_segment: int = 10
    angle_bins: int = 256
    backend: str = "oracle"
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    adapter_command: tuple[str, ...] = ()
    adapter_timeout: float = 60.0
    use_cache: bool = True
    join_epsilon: float = 0.5
    join_heading_deg: float = 30.0
    half_width: float = 3.0
    resolution: float = 0.1
    seed: int = 0
    jobs: int = 1
    rule_keys: tuple[str, ...] = DEFAULT_RULE_KEYS

    def __post_init__(self):
        object.__setattr__(self, "adapter_command", tuple(self.adapter_command))
        object.__setattr__(self, "rule_keys", tuple(self.rule_keys))
        if isinstance(self.noise, dict):
            object.__setattr__(self, "noise", NoiseSpec(**self.noise))
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.overlap_ratio < 0.5:
            raise ConfigError("overlap_ratio must lie in (0, 0.5)")
        if self.images_per_segment < 1:
            raise ConfigError("images_per_segment must be >= 1")
        if self.width_bins < 1 or self.height_bins < 1 or self.angle_bins < 1:
            raise ConfigError("bin counts must be positive")
        if self.bin_size <= 0 or self.half_width <= 0 or self.resolution <= 0:
            raise ConfigError("bin_size, half_width and resolution must be positive")
        if self.join_epsilon < 0 or not 0 <= self.join_heading_deg <= 180:
            raise ConfigError("join tolerances out of range")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        if self.adapter_timeout <= 0:
            raise ConfigError("adapter_timeout must be positive")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def frame_template(self) -> SegmentFrame:
        return SegmentFrame(Pose(0.0, 0.0, 0.0, 0.0), self.width_bins, self.height_bins, self.bin_size, self.overlap_ratio)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["adapter_command"] = list(self.adapter_command)
        out["rule_keys"] = list(self.rule_keys)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_env(self) -> "RunConfig":
        """Apply the adapter command override from the environment, if set."""
        cmd = os.environ.get(ADAPTER_ENV)
        if cmd:
            import shlex

            return self.replace(adapter_command=tuple(shlex.split(cmd)))
        return self
