"""Run configuration shared by the pipeline and the command line."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, FormatError
from .phasenet import SCHMITT_HI, SCHMITT_LO, PhaseNetConfig
from .preprocess import COLLIMATION_EPS
from .vesselness import VesselConfig


@dataclass
class RunConfig:
    """Everything a pipeline run needs besides its inputs.

    ``vessel`` and ``phase`` hold overrides for :class:`VesselConfig` and
    :class:`PhaseNetConfig`; their ``seed`` fields default to ``seed``.
    """

    vessel_weights: str | None = None
    phase_weights: str | None = None
    resolution: int = 64
    vessel_resolution: int = 32
    schmitt_hi: float = SCHMITT_HI
    schmitt_lo: float = SCHMITT_LO
    collimation_eps: float = COLLIMATION_EPS
    min_frames: int = 20
    min_visible: int = 15
    seed: int = 0
    threads: int = 1
    plot: bool = False
    vessel: dict = field(default_factory=dict)
    phase: dict = field(default_factory=dict)

    def vessel_config(self) -> VesselConfig:
        kw = {"resolution": self.vessel_resolution, "seed": self.seed, **self.vessel}
        try:
            cfg = VesselConfig(**kw)
        except TypeError as exc:
            raise ConfigError(f"vessel: {exc}") from exc
        cfg.validate()
        return cfg

    def phase_config(self) -> PhaseNetConfig:
        kw = {"resolution": self.resolution, "seed": self.seed, **self.phase}
        try:
            cfg = PhaseNetConfig(**kw)
        except TypeError as exc:
            raise ConfigError(f"phase: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self) -> RunConfig:
        if not 0.0 <= self.schmitt_lo < self.schmitt_hi <= 1.0:
            raise ConfigError(f"need 0 <= schmitt_lo < schmitt_hi <= 1, got {self.schmitt_lo}, {self.schmitt_hi}")
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.collimation_eps <= 0:
            raise ConfigError("collimation_eps must be positive")
        if self.min_frames < 0 or self.min_visible < 0:
            raise ConfigError("inclusion thresholds must be non-negative")
        self.vessel_config()
        self.phase_config()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON at line {exc.lineno}") from exc
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
